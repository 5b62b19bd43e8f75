"""INI-backed run configuration.

Every knob lives in a section.key cell with a typed default; a config file
and repeatable `section.key=value` overrides replace values but can never
introduce unknown keys. The run digest hashes everything result-affecting
(the output directory stays out) so two runs with the same digest are
byte-comparable.
"""

import configparser

from .seeding import stable_digest
from .training import TrainConfig


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "data": {
        "name": "dataset",
        "interactions": "",
        "social": "",
        "rating_threshold": "",
        "min_interactions": 2,
    },
    "split": {
        "train": 0.8,
        "valid": 0.1,
        "test": 0.1,
    },
    "model": {
        "d": 64,
        "k1": 2,
        "k2": 1,
        "no_social_tower": False,
        "no_social_influence": False,
        "no_trans_item_emb": False,
        "no_reaggregation": False,
    },
    "egopath": {
        "k": 2,
        "n_w": 100,
        "tau_start": 1.0,
        "tau_end": 0.3,
        "tau_epochs": 50,
        "topk_paths": 0,
    },
    "train": {
        "lr": 0.001,
        "lam": 0.001,
        "gamma": 0.5,
        "batch_size": 1024,
        "train_negatives": 10,
        "epochs": 500,
        "patience": 10,
        "init_scale": 0.1,
        "no_aux_loss": False,
    },
    "eval": {
        "mode": "test",
        "k": 10,
        "passes": 5,
        "valid_negatives": 1000,
        "top5_filter": False,
    },
    "analysis": {
        "triangle_any": True,
        "rank_filter": 5,
        "negatives_per_pair": 1,
        "max_pairs": "",
    },
    "run": {
        "seed": 0,
        "out": "runs",
    },
}

_BOOLEAN_STATES = configparser.ConfigParser.BOOLEAN_STATES


def default_config():
    return {section: dict(kv) for section, kv in DEFAULTS.items()}


def _coerce(section, key, raw, default):
    raw = str(raw).strip()
    if isinstance(default, bool):
        if raw.lower() not in _BOOLEAN_STATES:
            raise ConfigError(f"{section}.{key}: expected a boolean, "
                              f"got {raw!r}")
        return _BOOLEAN_STATES[raw.lower()]
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{section}.{key}: expected an integer, "
                              f"got {raw!r}") from None
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{section}.{key}: expected a number, "
                              f"got {raw!r}") from None
    return raw


def apply_override(cfg, text):
    head, sep, value = text.partition("=")
    if not sep or "." not in head:
        raise ConfigError(f"override must look like section.key=value, "
                          f"got {text!r}")
    section, _, key = head.strip().partition(".")
    key = key.strip()
    if section not in cfg:
        raise ConfigError(f"unknown config section [{section}]")
    if key not in cfg[section]:
        raise ConfigError(f"unknown config key {section}.{key}")
    cfg[section][key] = _coerce(section, key, value, DEFAULTS[section][key])


def load_config(path=None, overrides=()):
    cfg = default_config()
    if path is not None:
        parser = configparser.ConfigParser()
        try:
            loaded = parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not loaded:
            raise ConfigError(f"cannot read config file {path}")
        for section in parser.sections():
            if section not in cfg:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                if key not in cfg[section]:
                    raise ConfigError(f"unknown config key {section}.{key}")
                cfg[section][key] = _coerce(section, key, raw,
                                            DEFAULTS[section][key])
    for text in overrides:
        apply_override(cfg, text)
    validate(cfg)
    return cfg


def validate(cfg):
    ratios = (cfg["split"]["train"], cfg["split"]["valid"],
              cfg["split"]["test"])
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {ratios}")
    if any(r < 0 for r in ratios):
        raise ConfigError(f"split ratios must be nonnegative, got {ratios}")
    if cfg["eval"]["passes"] < 1 or cfg["eval"]["k"] < 1:
        raise ConfigError("eval.passes and eval.k must be >= 1")
    if cfg["eval"]["mode"] not in ("validation", "test"):
        raise ConfigError(f"eval.mode must be validation or test, "
                          f"got {cfg['eval']['mode']!r}")
    optional_int(cfg, "analysis", "max_pairs")
    optional_float(cfg, "data", "rating_threshold")


def optional_int(cfg, section, key):
    """Empty string means unset; anything else must parse as an integer."""
    raw = cfg[section][key]
    if raw == "":
        return None
    try:
        return int(str(raw).strip())
    except ValueError:
        raise ConfigError(f"{section}.{key}: expected an integer or empty, "
                          f"got {raw!r}") from None


def optional_float(cfg, section, key):
    raw = cfg[section][key]
    if raw == "":
        return None
    try:
        return float(str(raw).strip())
    except ValueError:
        raise ConfigError(f"{section}.{key}: expected a number or empty, "
                          f"got {raw!r}") from None


def flatten(cfg):
    return {f"{section}.{key}": cfg[section][key]
            for section in sorted(cfg) for key in sorted(cfg[section])}


def run_digest(cfg):
    """Digest of every result-affecting setting. run.out only moves files
    around, so it stays out of the hash."""
    flat = flatten(cfg)
    flat.pop("run.out", None)
    blob = ";".join(f"{k}={v!r}" for k, v in flat.items())
    return stable_digest(blob)


def to_train_config(cfg) -> TrainConfig:
    return TrainConfig(
        d=cfg["model"]["d"],
        k1=cfg["model"]["k1"],
        k2=cfg["model"]["k2"],
        k=cfg["egopath"]["k"],
        n_w=cfg["egopath"]["n_w"],
        tau_start=cfg["egopath"]["tau_start"],
        tau_end=cfg["egopath"]["tau_end"],
        tau_epochs=cfg["egopath"]["tau_epochs"],
        gamma=cfg["train"]["gamma"],
        lam=cfg["train"]["lam"],
        lr=cfg["train"]["lr"],
        batch_size=cfg["train"]["batch_size"],
        train_negatives=cfg["train"]["train_negatives"],
        epochs=cfg["train"]["epochs"],
        patience=cfg["train"]["patience"],
        valid_negatives=cfg["eval"]["valid_negatives"],
        eval_k=cfg["eval"]["k"],
        seed=cfg["run"]["seed"],
        init_scale=cfg["train"]["init_scale"],
        no_aux_loss=cfg["train"]["no_aux_loss"],
        no_reaggregation=cfg["model"]["no_reaggregation"],
        no_social_influence=cfg["model"]["no_social_influence"],
        no_social_tower=cfg["model"]["no_social_tower"],
        topk_paths=cfg["egopath"]["topk_paths"],
        no_trans_item_emb=cfg["model"]["no_trans_item_emb"],
    )
