"""Run configuration: INI-style file, strict schema, digest, builders.

Every field has a default except the dataset manifest, and unknown sections
or keys are hard errors so a typo can never silently fall back to a default.
The digest covers the architecture-defining sections plus the seed; it binds
checkpoints to the config that produced them.
"""

from __future__ import annotations

import configparser
import hashlib
import re
from pathlib import Path

from .attention import AttentionConfig
from .au_region import AUCenterTable, CenterRule, DEFAULT_AU_CENTER_RULES
from .backbone import BackboneConfig
from .bilstm import BiLSTMConfig
from .data import SYNTHETIC_AUS, SyntheticSpec
from .errors import ConfigError
from .hopfield import HopfieldConfig
from .model import BP4D_AUS, ModelConfig
from .train import TrainConfig

# section -> key -> default (as the string the file would contain)
SCHEMA: dict[str, dict[str, str]] = {
    "run": {"seed": "0", "out_dir": "runs/default", "threads": "0"},
    "data": {"manifest": "", "eval_manifest": "", "image_root": ""},
    "model": {
        "au_ids": ",".join(str(a) for a in BP4D_AUS),
        "landmark_count": "49",
        "d_au": "64",
        "crop": "6x6",
        "use_bilstm": "true",
        "use_attention": "true",
        "use_hopfield": "true",
        "lambda_lm": "0.5",
    },
    "backbone": {
        "input_size": "96x96",
        "input_channels": "1",
        "patch_grid": "2x4",
        "patch_channels": "16",
        "featconv_channels": "32,32",
        "patch_stride": "1",
    },
    "bilstm": {"hidden": "64"},
    "attention": {
        "d": "64", "d_k": "16", "d_v": "16", "n_heads": "4", "n_layers": "2",
        "dropout": "0.1",
    },
    "hopfield": {
        "d": "64", "d_k": "16", "d_v": "16", "n_heads": "4", "n_layers": "1",
        "dropout": "0.1", "update_steps": "3", "beta": "2.0",
        "convergence_epsilon": "1e-4",
    },
    "train": {
        "lr": "0.01", "lr_stage2": "", "momentum": "0.9",
        "weight_decay": "0.0005",
        "lr_decay": "0.3", "lr_decay_every": "2",
        "epochs_stage1": "6", "epochs_stage2": "6",
        "batch_size": "16", "eval_subset": "256",
    },
    "synthetic": {
        "au_ids": ",".join(str(a) for a in SYNTHETIC_AUS),
        "groups": "1+2+5,4+7+9",
        "exclusions": "12+15",
        "group_prob": "0.4",
        "exclusion_probs": "0.3,0.4",
        "independent_prob": "0.35",
        "n_samples": "3000",
        "n_subjects": "12",
        "image_size": "96",
        "noise": "0.25",
        "blob_sigma": "3.2",
        "attenuation": "0.13",
        "group_intensities": "0.55,0.28",
        "exclusion_intensities": "0.55,0.35",
        "independent_intensity": "0.55",
        "scaffold_intensity": "0.30",
        "gain_jitter": "0.15",
        "subject_jitter": "0.02",
        "landmark_jitter": "0.006",
        "image_format": "f64",
    },
}

DIGEST_SECTIONS = ("model", "backbone", "bilstm", "attention", "hopfield",
                   "au_centers")
ABLATIONS = ("none", "bilstm", "attention", "hopfield", "full")

_AU_KEY = re.compile(r"^au(\d+)$")
_RULE = re.compile(r"^\s*(?P<terms>[^@]+?)\s*(?:@\s*(?P<off>.+))?$")


def _parse_bool(value: str, where: str) -> bool:
    low = value.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"{where}: expected a boolean, got {value!r}")


def _parse_int(value: str, where: str) -> int:
    try:
        return int(value)
    except ValueError as exc:
        raise ConfigError(f"{where}: expected an integer, got {value!r}") from exc


def _parse_float(value: str, where: str) -> float:
    try:
        return float(value)
    except ValueError as exc:
        raise ConfigError(f"{where}: expected a number, got {value!r}") from exc


def _parse_pair(value: str, where: str) -> tuple[int, int]:
    parts = value.lower().split("x")
    if len(parts) != 2:
        raise ConfigError(f"{where}: expected AxB, got {value!r}")
    return _parse_int(parts[0], where), _parse_int(parts[1], where)


def _parse_int_list(value: str, where: str) -> tuple[int, ...]:
    return tuple(_parse_int(v, where) for v in value.split(",") if v.strip())


def parse_center_rule(value: str, where: str) -> CenterRule:
    match = _RULE.match(value)
    if not match:
        raise ConfigError(f"{where}: malformed center rule {value!r}")
    terms = []
    for item in match.group("terms").split(";"):

        if ":" not in item:
            raise ConfigError(f"{where}: term {item!r} must be index:weight")
        idx, weight = item.split(":", 1)
        terms.append((_parse_int(idx, where), _parse_float(weight, where)))
    offset = (0.0, 0.0)
    if match.group("off"):
        parts = match.group("off").split(",")
        if len(parts) != 2:
            raise ConfigError(f"{where}: offset must be dx,dy")
        offset = (_parse_float(parts[0], where), _parse_float(parts[1], where))
    return CenterRule(tuple(terms), offset)


def format_center_rule(rule: CenterRule) -> str:
    terms = ";".join(f"{i}:{w!r}" for i, w in rule.terms)
    return f"{terms} @ {rule.offset[0]!r},{rule.offset[1]!r}"


class RunConfig:
    """Validated key/value store plus typed builders for every component."""

    def __init__(self, values: dict[str, dict[str, str]] | None = None):
        self.values = {section: dict(defaults) for section, defaults in SCHEMA.items()}
        self.center_overrides: dict[int, CenterRule] = {}
        if values:
            for section, keys in values.items():
                for key, value in keys.items():
                    self.set(section, key, value)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None, strict=True)
        parser.optionxform = str
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        cfg = cls()
        for section in parser.sections():
            for key, value in parser.items(section):
                cfg.set(section, key, value)
        return cfg

    def set(self, section: str, key: str, value: str):
        if section == "au_centers":
            match = _AU_KEY.match(key)
            if not match:
                raise ConfigError(
                    f"[au_centers] keys must look like 'au12', got {key!r}")
            self.center_overrides[int(match.group(1))] = parse_center_rule(
                value, f"au_centers.{key}")
            return
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        self.values[section][key] = value

    def get(self, section: str, key: str) -> str:
        return self.values[section][key]

    # -- typed accessors -------------------------------------------------

    @property
    def seed(self) -> int:
        return _parse_int(self.get("run", "seed"), "run.seed")

    @property
    def out_dir(self) -> str:
        return self.get("run", "out_dir")

    @property
    def threads(self) -> int:
        return _parse_int(self.get("run", "threads"), "run.threads")

    def apply_ablation(self, ablation: str):
        if ablation not in ABLATIONS:
            raise ConfigError(
                f"unknown ablation {ablation!r}; choose from {ABLATIONS}")
        switches = {
            "none": (False, False, False),
            "bilstm": (True, False, False),
            "attention": (False, True, False),
            "hopfield": (False, False, True),
            "full": (True, True, True),
        }[ablation]
        for key, value in zip(("use_bilstm", "use_attention", "use_hopfield"),
                              switches):
            self.set("model", key, "true" if value else "false")

    def center_table(self) -> AUCenterTable:
        rules = dict(DEFAULT_AU_CENTER_RULES)
        rules.update(self.center_overrides)
        return AUCenterTable(rules)

    def backbone_config(self) -> BackboneConfig:
        v = self.values["backbone"]
        return BackboneConfig(
            input_size=_parse_pair(v["input_size"], "backbone.input_size"),
            input_channels=_parse_int(v["input_channels"], "backbone.input_channels"),
            patch_grid=_parse_pair(v["patch_grid"], "backbone.patch_grid"),
            patch_channels=_parse_int(v["patch_channels"], "backbone.patch_channels"),
            featconv_channels=list(_parse_int_list(
                v["featconv_channels"], "backbone.featconv_channels")),
            patch_stride=_parse_int(v["patch_stride"], "backbone.patch_stride"),
        )

    def model_config(self) -> ModelConfig:
        v = self.values["model"]
        d_au = _parse_int(v["d_au"], "model.d_au")
        att = self.values["attention"]
        hop = self.values["hopfield"]
        return ModelConfig(
            backbone=self.backbone_config(),
            au_ids=_parse_int_list(v["au_ids"], "model.au_ids"),
            landmark_count=_parse_int(v["landmark_count"], "model.landmark_count"),
            d_au=d_au,
            crop=_parse_pair(v["crop"], "model.crop"),
            use_bilstm=_parse_bool(v["use_bilstm"], "model.use_bilstm"),
            use_attention=_parse_bool(v["use_attention"], "model.use_attention"),
            use_hopfield=_parse_bool(v["use_hopfield"], "model.use_hopfield"),
            bilstm=BiLSTMConfig(
                d_au=d_au,
                hidden=_parse_int(self.get("bilstm", "hidden"), "bilstm.hidden")),
            attention=AttentionConfig(
                d=_parse_int(att["d"], "attention.d"),
                d_k=_parse_int(att["d_k"], "attention.d_k"),
                d_v=_parse_int(att["d_v"], "attention.d_v"),
                n_heads=_parse_int(att["n_heads"], "attention.n_heads"),
                n_layers=_parse_int(att["n_layers"], "attention.n_layers"),
                dropout=_parse_float(att["dropout"], "attention.dropout")),
            hopfield=HopfieldConfig(
                d=_parse_int(hop["d"], "hopfield.d"),
                d_k=_parse_int(hop["d_k"], "hopfield.d_k"),
                d_v=_parse_int(hop["d_v"], "hopfield.d_v"),
                n_heads=_parse_int(hop["n_heads"], "hopfield.n_heads"),
                n_layers=_parse_int(hop["n_layers"], "hopfield.n_layers"),
                dropout=_parse_float(hop["dropout"], "hopfield.dropout"),
                update_steps=_parse_int(hop["update_steps"], "hopfield.update_steps"),
                beta=_parse_float(hop["beta"], "hopfield.beta"),
                convergence_epsilon=_parse_float(
                    hop["convergence_epsilon"], "hopfield.convergence_epsilon")),
            lambda_lm=_parse_float(v["lambda_lm"], "model.lambda_lm"),
        )

    def train_config(self) -> TrainConfig:
        v = self.values["train"]
        return TrainConfig(
            lr=_parse_float(v["lr"], "train.lr"),
            lr_stage2=(None if not v["lr_stage2"].strip()
                       else _parse_float(v["lr_stage2"], "train.lr_stage2")),
            momentum=_parse_float(v["momentum"], "train.momentum"),
            weight_decay=_parse_float(v["weight_decay"], "train.weight_decay"),
            lr_decay=_parse_float(v["lr_decay"], "train.lr_decay"),
            lr_decay_every=_parse_int(v["lr_decay_every"], "train.lr_decay_every"),
            epochs_stage1=_parse_int(v["epochs_stage1"], "train.epochs_stage1"),
            epochs_stage2=_parse_int(v["epochs_stage2"], "train.epochs_stage2"),
            batch_size=_parse_int(v["batch_size"], "train.batch_size"),
            eval_subset=_parse_int(v["eval_subset"], "train.eval_subset"),
        )

    def synthetic_spec(self) -> SyntheticSpec:
        v = self.values["synthetic"]

        def groups(raw, where):
            return tuple(tuple(_parse_int(x, where) for x in item.split("+"))
                         for item in raw.split(",") if item.strip())

        probs = tuple(_parse_float(x, "synthetic.exclusion_probs")
                      for x in v["exclusion_probs"].split(","))
        if len(probs) != 2:
            raise ConfigError("synthetic.exclusion_probs needs two values")
        fmt = v["image_format"]
        if fmt not in ("f64", "png"):
            raise ConfigError(
                f"synthetic.image_format must be f64 or png, got {fmt!r}")
        return SyntheticSpec(
            au_ids=_parse_int_list(v["au_ids"], "synthetic.au_ids"),
            groups=groups(v["groups"], "synthetic.groups"),
            exclusions=groups(v["exclusions"], "synthetic.exclusions"),
            group_prob=_parse_float(v["group_prob"], "synthetic.group_prob"),
            exclusion_probs=probs,
            independent_prob=_parse_float(
                v["independent_prob"], "synthetic.independent_prob"),
            n_samples=_parse_int(v["n_samples"], "synthetic.n_samples"),
            n_subjects=_parse_int(v["n_subjects"], "synthetic.n_subjects"),
            image_size=_parse_int(v["image_size"], "synthetic.image_size"),
            noise=_parse_float(v["noise"], "synthetic.noise"),
            blob_sigma=_parse_float(v["blob_sigma"], "synthetic.blob_sigma"),
            attenuation=_parse_float(v["attenuation"], "synthetic.attenuation"),
            group_intensities=tuple(
                _parse_float(x, "synthetic.group_intensities")
                for x in v["group_intensities"].split(",") if x.strip()),
            exclusion_intensities=tuple(
                _parse_float(x, "synthetic.exclusion_intensities")
                for x in v["exclusion_intensities"].split(",") if x.strip()),
            independent_intensity=_parse_float(
                v["independent_intensity"], "synthetic.independent_intensity"),
            gain_jitter=_parse_float(v["gain_jitter"], "synthetic.gain_jitter"),
            scaffold_intensity=_parse_float(
                v["scaffold_intensity"], "synthetic.scaffold_intensity"),
            subject_jitter=_parse_float(
                v["subject_jitter"], "synthetic.subject_jitter"),
            landmark_jitter=_parse_float(
                v["landmark_jitter"], "synthetic.landmark_jitter"),
        )

    @property
    def image_format(self) -> str:
        return self.get("synthetic", "image_format")

    # -- digest -----------------------------------------------------------

    def digest(self) -> str:
        parts = [f"run.seed={self.get('run', 'seed').strip()}"]
        for section in DIGEST_SECTIONS:
            if section == "au_centers":
                for au in sorted(self.center_overrides):
                    parts.append(
                        f"au_centers.au{au}="
                        f"{format_center_rule(self.center_overrides[au])}")
                continue
            for key in sorted(SCHEMA[section]):
                parts.append(f"{section}.{key}={self.values[section][key].strip()}")
        return hashlib.sha256("\n".join(parts).encode("utf-8")).hexdigest()

    def dump(self) -> str:
        lines = []
        for section, keys in self.values.items():
            lines.append(f"[{section}]")
            for key, value in keys.items():
                lines.append(f"{key} = {value}")
            lines.append("")
        if self.center_overrides:
            lines.append("[au_centers]")
            for au in sorted(self.center_overrides):
                lines.append(
                    f"au{au} = {format_center_rule(self.center_overrides[au])}")
            lines.append("")
        return "\n".join(lines)

    def write(self, path):
        Path(path).write_text(self.dump(), encoding="utf-8")
