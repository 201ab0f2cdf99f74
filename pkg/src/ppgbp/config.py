"""Flat ``key = value`` config files and the resolved run configuration."""
from dataclasses import dataclass, field, fields, replace

from .errors import InvalidSpecError
from .net.model import HyperParams
from .train import TrainConfig

FOLD_MODES = ("lowo", "block-kfold")
MODELS = ("net", "oracle", "mean")


def parse_kv(text):
    """``key = value`` lines; ``#`` starts a comment, blank lines are ignored."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidSpecError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise InvalidSpecError(f"line {lineno}: empty key")
        if key in out:
            raise InvalidSpecError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _coerce(kind, raw, key):
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        return kind(raw)
    except ValueError as exc:
        raise InvalidSpecError(f"{key}: {exc}") from None


_TYPES = {int: int, float: float, bool: bool, str: str, "int": int, "float": float,
          "bool": bool, "str": str}


@dataclass
class RunConfig:
    seed: int = 0
    fold_mode: str = "lowo"
    exclusion_radius: int = 3
    n_blocks: int = 5
    paper_faithful: bool = False
    jobs: int = 1
    model: str = "net"
    save_checkpoints: bool = False
    hp: HyperParams = field(default_factory=HyperParams)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self):
        if self.fold_mode not in FOLD_MODES:
            raise InvalidSpecError(f"fold_mode must be one of {FOLD_MODES}")
        if self.model not in MODELS:
            raise InvalidSpecError(f"model must be one of {MODELS}")
        if self.exclusion_radius < 0:
            raise InvalidSpecError("exclusion_radius must be >= 0")
        if self.n_blocks < 2:
            raise InvalidSpecError("n_blocks must be >= 2")
        if self.jobs < 1:
            raise InvalidSpecError("jobs must be >= 1")
        return self

    def train_config(self, seed=None):
        return replace(self.train, seed=self.seed if seed is None else seed)

    def flat(self):
        """Flat key/value view; nested settings are prefixed ``hp.`` and ``train.``."""
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("hp", "train"):
                for g in fields(v):
                    if f.name == "train" and g.name == "seed":
                        continue  # single source of truth: the top-level seed
                    out[f"{f.name}.{g.name}"] = getattr(v, g.name)
            else:
                out[f.name] = v
        return out

    def to_text(self):
        return "".join(f"{k} = {v!r}\n" if isinstance(v, float) else f"{k} = {v}\n"
                       for k, v in self.flat().items())

    def update(self, kv):
        """Return a copy with string values from ``kv`` applied."""
        top, hp, tr = {}, {}, {}
        top_types = {f.name: _TYPES[f.type] for f in fields(self) if f.name not in ("hp", "train")}
        hp_types = {f.name: _TYPES[f.type] for f in fields(HyperParams)}
        tr_types = {f.name: _TYPES[f.type] for f in fields(TrainConfig) if f.name != "seed"}
        for key, raw in kv.items():
            if key.startswith("hp.") and key[3:] in hp_types:
                hp[key[3:]] = _coerce(hp_types[key[3:]], raw, key)
            elif key.startswith("train.") and key[6:] in tr_types:
                tr[key[6:]] = _coerce(tr_types[key[6:]], raw, key)
            elif key in top_types:
                top[key] = _coerce(top_types[key], raw, key)
            else:
                raise InvalidSpecError(f"unknown config key {key!r}")
        try:
            new_hp = HyperParams(**{**self.hp.to_dict(), **hp})
            new_tr = TrainConfig(**{**{f.name: getattr(self.train, f.name)
                                       for f in fields(TrainConfig)}, **tr})
        except ValueError as exc:
            raise InvalidSpecError(str(exc)) from None
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        vals.update(top, hp=new_hp, train=new_tr)
        return RunConfig(**vals).validate()


def load_run_config(path=None, overrides=None):
    cfg = RunConfig()
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            cfg = cfg.update(parse_kv(fh.read()))
    if overrides:
        cfg = cfg.update({k: str(v) for k, v in overrides.items()})
    return cfg.validate()
