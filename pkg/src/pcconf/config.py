"""Run configuration: flat ``section.key = value`` text files.

Lines starting with ``#`` or ``;`` are comments. Every key has a default;
unknown keys are an error. Lists are comma separated.
"""

from dataclasses import dataclass

from .confnet import TrainConfig
from .embedsim import WorldConfig


class ConfigError(ValueError):
    pass


def _bool(text):
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text):
    return tuple(float(x) for x in text.split(",") if x.strip())


def _ints(text):
    return tuple(int(x) for x in text.split(",") if x.strip())


def _str(text):
    return text.strip()


SCHEMA = {
    "world.ambient_dim": (int, 64),
    "world.identity_dim": (int, 8),
    "world.num_identities": (int, 200),
    "world.images_per_identity": (int, 20),
    "world.high_quality_weight": (float, 0.6),
    "world.high_quality_beta": (_floats, (8.0, 2.0)),
    "world.low_quality_beta": (_floats, (1.5, 4.0)),
    "world.degradation_probability": (float, 0.2),
    "world.noise_scale": (float, 3.0),
    "world.mask_fraction": (float, 0.1),
    "world.heavy_tail_df": (float, 3.0),
    "world.decrement_iso_noise": (float, 0.2),
    "world.decrement_coord_mask": (float, 0.3),
    "world.decrement_heavy_tail": (float, 0.25),
    "pairs.pair_budget": (int, 500),
    "pairs.clamp": (_bool, True),
    "train.batch_size": (int, 64),
    "train.initial_lr": (float, 0.1),
    "train.decay_factor": (float, 10.0),
    "train.max_decays": (int, 2),
    "train.patience": (int, 3),
    "train.rel_tol": (float, 1e-3),
    "train.max_epochs": (int, 60),
    "train.hidden_sizes": (_ints, (128, 128)),
    "protocol.eval_identities": (int, 300),
    "protocol.eval_images_per_identity": (int, 20),
    "protocol.n_genuine": (int, 10_000),
    "protocol.n_impostor": (int, 100_000),
    "protocol.correlation_bins": (int, 100),
    "eval.r_step": (float, 0.01),
    "eval.r_max": (float, 0.4),
    "eval.far_targets": (_floats, (1e-6, 1e-5, 1e-4, 1e-3, 1e-2)),
    "eval.report_r": (_floats, (0.0, 0.1, 0.2, 0.3, 0.4)),
    "fusion.identities": (int, 400),
    "fusion.images_per_identity": (int, 48),
    "fusion.sets_per_identity": (int, 3),
    "fusion.min_size": (int, 2),
    "fusion.max_size": (int, 16),
    "fusion.low_quality_fraction": (float, 0.3),
    "fusion.low_quality_threshold": (float, 0.3),
    "fusion.n_impostor": (int, 0),
    "rank.boundaries": (_floats, (1 / 3, 2 / 3)),
    "rank.samples_per_bucket": (int, 10),
    "run.seed": (int, 0),
    "run.threads": (int, 1),
    "run.out": (_str, ""),
}


def parse_assignments(lines, source="<config>"):
    values = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'")
        key, _, text = line.partition("=")
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        parse, _ = SCHEMA[key]
        try:
            values[key] = parse(text.strip())
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    return values


@dataclass(frozen=True)
class RunConfig:
    values: dict

    @classmethod
    def load(cls, path=None, overrides=()):
        values = {key: default for key, (_, default) in SCHEMA.items()}
        if path is not None:
            try:
                with open(path) as fh:
                    lines = fh.read().splitlines()
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
            values.update(parse_assignments(lines, str(path)))
        values.update(parse_assignments(overrides, "<overrides>"))
        config = cls(values)
        config.validate()
        return config

    def __getitem__(self, key):
        return self.values[key]

    def replace(self, **updates):
        values = dict(self.values)
        for key, value in updates.items():
            values[key.replace("__", ".")] = value
        return RunConfig(values)

    def validate(self):
        try:
            self.world_config()
            self.train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self["run.threads"] < 1:
            raise ConfigError("run.threads must be at least 1")
        grid = self.r_grid()
        missing = [r for r in self["eval.report_r"] if round(r, 10) not in {round(g, 10) for g in grid}]
        if missing:
            raise ConfigError(f"eval.report_r values {missing} are not on the rejection grid")
        b = self["rank.boundaries"]
        if len(b) != 2 or not 0 < b[0] < b[1] < 1:
            raise ConfigError("rank.boundaries must be two increasing fractions in (0, 1)")

    @property
    def seed(self):
        return self["run.seed"]

    def world_config(self, split="train"):
        num, per = self["world.num_identities"], self["world.images_per_identity"]
        if split == "eval":
            num, per = self["protocol.eval_identities"], self["protocol.eval_images_per_identity"]
        elif split == "fusion":
            num, per = self["fusion.identities"], self["fusion.images_per_identity"]
        return WorldConfig(
            ambient_dim=self["world.ambient_dim"],
            identity_dim=self["world.identity_dim"],
            num_identities=num,
            images_per_identity=per,
            high_quality_weight=self["world.high_quality_weight"],
            high_quality_beta=tuple(self["world.high_quality_beta"]),
            low_quality_beta=tuple(self["world.low_quality_beta"]),
            degradation_probability=self["world.degradation_probability"],
            noise_scale=self["world.noise_scale"],
            mask_fraction=self["world.mask_fraction"],
            heavy_tail_df=self["world.heavy_tail_df"],
            decrements={
                "iso_noise": self["world.decrement_iso_noise"],
                "coord_mask": self["world.decrement_coord_mask"],
                "heavy_tail": self["world.decrement_heavy_tail"],
            },
            seed=self.seed,
        )

    def train_config(self, seed=0):
        return TrainConfig(
            batch_size=self["train.batch_size"],
            initial_lr=self["train.initial_lr"],
            decay_factor=self["train.decay_factor"],
            max_decays=self["train.max_decays"],
            patience=self["train.patience"],
            rel_tol=self["train.rel_tol"],
            max_epochs=self["train.max_epochs"],
            hidden_sizes=tuple(self["train.hidden_sizes"]),
            seed=seed,
        )

    def r_grid(self):
        step, r_max = self["eval.r_step"], self["eval.r_max"]
        if step <= 0 or not 0 <= r_max < 1:
            raise ConfigError("eval.r_step must be positive and eval.r_max in [0, 1)")
        n = int(round(r_max / step))
        return [round(i * step, 10) for i in range(n + 1)]

    def snapshot(self):
        """Resolved key/value pairs as JSON-friendly data."""
        return {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(self.values.items())}

    def to_text(self):
        lines = []
        for key, value in sorted(self.values.items()):
            if isinstance(value, tuple):
                text = ", ".join(repr(v) for v in value)
            elif isinstance(value, bool):
                text = "true" if value else "false"
            else:
                text = str(value)
            lines.append(f"{key} = {text}")
        return "\n".join(lines) + "\n"
