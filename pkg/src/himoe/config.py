"""Flat ``key = value`` configuration files.

Blank lines and text after ``#`` are ignored. Unknown keys, repeated keys and
malformed values are rejected with the offending line number. Every key is
optional; missing keys keep the defaults below.

Keys
    variant            flat | flat_lossfree_bias | grouped | hi_moe
    num_experts        N
    num_groups         M, experts split into M equal contiguous groups
    group_sizes        comma list; overrides num_groups
    k_per_group        K_m, one integer or a comma list per group
    temperature        T
    bias_strength      tau
    ema_decay          beta
    load_coeff         alpha
    lambda_intra, lambda_inter
    bias_rate          step of the loss-free selection bias
    d_model, d_ff      layer widths
    lr, beta1, beta2, eps, weight_decay
    steps, batch_size, seed
    num_clusters       also the number of classes
    tokens_per_cluster, cluster_spread, data_seed
"""
from __future__ import annotations

from dataclasses import dataclass, replace

from .harness import SyntheticDatasetSpec, TrainConfig
from .router import GroupPartition, RouterConfig


class ConfigError(ValueError):
    pass


_INT = int
_FLOAT = float


def _int_list(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.split(",") if v.strip())


DEFAULTS: dict[str, object] = {
    "variant": "hi_moe",
    "num_experts": 8,
    "num_groups": 4,
    "group_sizes": None,
    "k_per_group": (1,),
    "temperature": 1.0,
    "bias_strength": 0.01,
    "ema_decay": 0.9,
    "load_coeff": 0.01,
    "lambda_intra": 0.1,
    "lambda_inter": 0.05,
    "bias_rate": 0.001,
    "d_model": 16,
    "d_ff": 64,
    "lr": 1e-3,
    "beta1": 0.9,
    "beta2": 0.95,
    "eps": 1e-8,
    "weight_decay": 0.0,
    "steps": 2000,
    "batch_size": 64,
    "seed": 0,
    "num_clusters": 16,
    "tokens_per_cluster": 64,
    "cluster_spread": 0.3,
    "data_seed": 0,
}

_PARSERS = {
    "variant": str,
    "group_sizes": _int_list,
    "k_per_group": _int_list,
    "num_experts": _INT, "num_groups": _INT, "d_model": _INT, "d_ff": _INT,
    "steps": _INT, "batch_size": _INT, "seed": _INT, "num_clusters": _INT,
    "tokens_per_cluster": _INT, "data_seed": _INT,
}


@dataclass(frozen=True)
class LabConfig:
    train: TrainConfig
    data: SyntheticDatasetSpec

    def with_seed(self, seed: int) -> "LabConfig":
        return replace(self, train=replace(self.train, seed=int(seed)))


def parse_config(text: str, source: str = "<config>") -> LabConfig:
    values = dict(DEFAULTS)
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: {key!r} already set on line {seen[key]}")
        seen[key] = lineno
        try:
            values[key] = _PARSERS.get(key, _FLOAT)(value)
        except ValueError:
            raise ConfigError(f"{source}:{lineno}: bad value {value!r} for {key!r}") from None
    try:
        return build_config(values)
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def build_config(values: dict) -> LabConfig:
    v = dict(DEFAULTS)
    v.update(values)
    n = int(v["num_experts"])
    if v["group_sizes"]:
        partition = GroupPartition.from_sizes(v["group_sizes"])
    else:
        partition = GroupPartition.equal(n, int(v["num_groups"]))
    k = tuple(v["k_per_group"])
    if len(k) == 1:
        k = k * partition.num_groups
    router = RouterConfig(
        num_experts=n, partition=partition, k_per_group=k,
        temperature=float(v["temperature"]), bias_strength=float(v["bias_strength"]),
        ema_decay=float(v["ema_decay"]), load_coeff=float(v["load_coeff"]),
        lambda_intra=float(v["lambda_intra"]), lambda_inter=float(v["lambda_inter"]),
        variant=str(v["variant"]), bias_rate=float(v["bias_rate"]),
    )
    train = TrainConfig(
        router=router, d_model=int(v["d_model"]), d_ff=int(v["d_ff"]),
        num_classes=int(v["num_clusters"]), lr=float(v["lr"]), beta1=float(v["beta1"]),
        beta2=float(v["beta2"]), eps=float(v["eps"]), weight_decay=float(v["weight_decay"]),
        steps=int(v["steps"]), batch_size=int(v["batch_size"]), seed=int(v["seed"]),
    )
    data = SyntheticDatasetSpec(
        num_clusters=int(v["num_clusters"]), dim=int(v["d_model"]),
        tokens_per_cluster=int(v["tokens_per_cluster"]),
        cluster_spread=float(v["cluster_spread"]), seed=int(v["data_seed"]),
    )
    return LabConfig(train, data)


def default_config() -> LabConfig:
    return build_config({})


def load_config(path) -> LabConfig:
    with open(path) as fh:
        return parse_config(fh.read(), source=str(path))


def format_config(cfg: LabConfig) -> str:
    """Serialize back to key = value text that parses to the same config."""
    t, r, d = cfg.train, cfg.train.router, cfg.data
    items = {
        "variant": r.variant, "num_experts": r.num_experts,
        "group_sizes": ",".join(map(str, r.partition.sizes)),
        "k_per_group": ",".join(map(str, r.k_per_group)),
        "temperature": r.temperature, "bias_strength": r.bias_strength,
        "ema_decay": r.ema_decay, "load_coeff": r.load_coeff,
        "lambda_intra": r.lambda_intra, "lambda_inter": r.lambda_inter,
        "bias_rate": r.bias_rate, "d_model": t.d_model, "d_ff": t.d_ff,
        "lr": t.lr, "beta1": t.beta1, "beta2": t.beta2, "eps": t.eps,
        "weight_decay": t.weight_decay, "steps": t.steps, "batch_size": t.batch_size,
        "seed": t.seed, "num_clusters": d.num_clusters,
        "tokens_per_cluster": d.tokens_per_cluster, "cluster_spread": d.cluster_spread,
        "data_seed": d.seed,
    }
    return "".join(f"{k} = {v!r}\n" if isinstance(v, float) else f"{k} = {v}\n"
                   for k, v in items.items())
