"""Projector configuration, flat key-value files and bundled presets."""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

from .errors import ConfigError

REFINE_STAGES = ("emhsa", "mhca")


def parse_kv(text: str, source: str = "<text>") -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def parse_bool(value: str, key: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {value!r}")


def preset_text(name: str) -> str:
    try:
        return resources.files("deltaproj.presets").joinpath(f"{name}.txt").read_text()
    except FileNotFoundError:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(available_presets())}") from None


def available_presets() -> list[str]:
    return sorted(
        p.name[:-4] for p in resources.files("deltaproj.presets").iterdir() if p.name.endswith(".txt")
    )


@dataclass(frozen=True)
class ProjectorConfig:
    """Structural hyperparameters of one projector instance.

    Grid sizes follow ``N = img_h*img_w / patch**2`` raw patches and
    ``V = N / scale**2`` output tokens.
    """

    img_h: int = 336
    img_w: int = 336
    patch: int = 14
    scale: int = 2
    feat_dim: int = 64
    embed_dim: int = 64
    heads: int = 4
    rank: int = 8
    window: int = 3
    mem_tokens: int = 16
    ntb_depth: int = 2
    ffn_hidden: int = 4096
    attn_reduce: int = 1
    ln_eps: float = 1e-5
    seed: int = 0
    use_emhsa: bool = True
    use_deltaproj: bool = True
    use_tb: bool = True
    refine: tuple[str, ...] = REFINE_STAGES
    add_pos2d: bool = True

    # -- derived sizes --------------------------------------------------
    @property
    def grid_h0(self) -> int:
        return self.img_h // self.patch

    @property
    def grid_w0(self) -> int:
        return self.img_w // self.patch

    @property
    def grid_h(self) -> int:
        return self.grid_h0 // self.scale

    @property
    def grid_w(self) -> int:
        return self.grid_w0 // self.scale

    @property
    def num_patches(self) -> int:
        return self.grid_h0 * self.grid_w0

    @property
    def num_queries(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def ablation_flags(self) -> dict[str, bool]:
        return {"use_emhsa": self.use_emhsa, "use_deltaproj": self.use_deltaproj, "use_tb": self.use_tb}

    # -- validation -----------------------------------------------------
    def validate(self) -> "ProjectorConfig":
        bad = []
        pos = ("img_h", "img_w", "patch", "scale", "feat_dim", "embed_dim", "heads", "rank",
               "window", "mem_tokens", "ffn_hidden", "attn_reduce")
        for name in pos:
            if getattr(self, name) < 1:
                bad.append(f"{name} >= 1 (got {getattr(self, name)})")
        if bad:
            raise ConfigError("invalid config: " + "; ".join(bad))
        if self.ntb_depth < 0:
            bad.append(f"ntb_depth >= 0 (got {self.ntb_depth})")
        if self.img_h % self.patch or self.img_w % self.patch:
            bad.append(f"patch {self.patch} | img {self.img_h}x{self.img_w}")
        elif self.grid_h0 % self.scale or self.grid_w0 % self.scale:
            bad.append(f"scale {self.scale} | patch grid {self.grid_h0}x{self.grid_w0}")
        elif self.grid_h % self.window or self.grid_w % self.window:
            bad.append(f"window {self.window} | query grid {self.grid_h}x{self.grid_w}")
        elif self.use_emhsa and self.attn_reduce > 1 and (
            self.grid_h % self.attn_reduce or self.grid_w % self.attn_reduce
        ):
            bad.append(f"attn_reduce {self.attn_reduce} | query grid {self.grid_h}x{self.grid_w}")
        if self.feat_dim % self.heads or self.embed_dim % self.heads:
            bad.append(f"heads {self.heads} | feat_dim {self.feat_dim} and embed_dim {self.embed_dim}")
        if not self.rank < min(self.feat_dim, self.embed_dim):
            bad.append(f"rank {self.rank} < min(feat_dim, embed_dim) = {min(self.feat_dim, self.embed_dim)}")
        if self.add_pos2d and self.feat_dim % 4:
            bad.append(f"4 | feat_dim {self.feat_dim} (positional embedding)")
        unknown = [s for s in self.refine if s not in REFINE_STAGES]
        if unknown:
            bad.append(f"refine stages {unknown} not in {REFINE_STAGES}")
        if self.ln_eps <= 0:
            bad.append(f"ln_eps > 0 (got {self.ln_eps})")
        if bad:
            raise ConfigError("invalid config: " + "; ".join(bad))
        return self

    # -- serialisation --------------------------------------------------
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, tuple):
                v = ",".join(v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    @classmethod
    def from_mapping(cls, kv: dict[str, str], source: str = "<config>") -> "ProjectorConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(kv) - set(known))
        if unknown:
            raise ConfigError(f"{source}: unknown config keys {unknown}")
        values = {}
        for key, raw in kv.items():
            default = known[key].default
            try:
                if isinstance(default, bool):
                    values[key] = parse_bool(raw, key)
                elif isinstance(default, int):
                    values[key] = int(raw)
                elif isinstance(default, float):
                    values[key] = float(raw)
                elif isinstance(default, tuple):
                    values[key] = tuple(s.strip() for s in raw.split(",") if s.strip())
                else:
                    values[key] = raw
            except ValueError:
                raise ConfigError(f"{source}: bad value for {key}: {raw!r}") from None
        return cls(**values)

    @classmethod
    def from_text(cls, text: str, source: str = "<text>") -> "ProjectorConfig":
        return cls.from_mapping(parse_kv(text, source), source)

    @classmethod
    def load(cls, path) -> "ProjectorConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text, str(path))

    @classmethod
    def preset(cls, name: str) -> "ProjectorConfig":
        return cls.from_text(preset_text(name), f"preset:{name}")

    def replace(self, **changes) -> "ProjectorConfig":
        return dataclasses.replace(self, **changes)


def token_count(cfg: ProjectorConfig) -> int:
    """``V = img_h*img_w / (patch**2 * scale**2)`` after checking every divisibility constraint."""
    return cfg.validate().num_queries


def largest_window(side: int, cap: int = 4) -> int:
    return max(w for w in range(1, min(cap, side) + 1) if side % w == 0)


def config_for_budget(base: ProjectorConfig, budget: int) -> ProjectorConfig:
    """Derive the config whose token count is ``budget`` by choosing the integer scale.

    The window is kept when it tiles the new query grid, otherwise replaced by
    the largest divisor of the grid side not exceeding 4.
    """
    h0, w0 = base.grid_h0, base.grid_w0
    for s in range(1, min(h0, w0) + 1):
        if h0 % s == 0 and w0 % s == 0 and (h0 // s) * (w0 // s) == budget:
            gh, gw = h0 // s, w0 // s
            win = base.window
            if gh % win or gw % win:
                win = largest_window(min(gh, gw))
                while gh % win or gw % win:
                    win -= 1
            reduce = base.attn_reduce if (gh % base.attn_reduce == 0 and gw % base.attn_reduce == 0) else 1
            return base.replace(scale=s, window=win, attn_reduce=reduce).validate()
    raise ConfigError(
        f"token budget {budget} is not reachable by an integer scale on the {h0}x{w0} patch grid"
    )
