"""Learnable-parameter and multiply-accumulate accounting per submodule.

Parameter counts come from each layer's configuration formula; MACs come from
one instrumented forward pass at the configured input size (batch 1). Only
contractions are counted: convolutions, matmuls and attention products.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from dagseg import _macs
from dagseg.model import SegNet
from dagseg.tensor import no_grad

GROUPS = ("baseline", "dag_gates", "transformer")


def group_of(name: str) -> str:
    top = name.split(".", 1)[0]
    if top == "gates":
        return "dag_gates"
    if top == "transformer":
        return "transformer"
    return "baseline"


@dataclass
class ProfileEntry:
    name: str
    params: int
    macs: int

    @property
    def group(self) -> str:
        return group_of(self.name)


@dataclass
class ProfileReport:
    input_size: tuple[int, int]
    entries: list[ProfileEntry] = field(default_factory=list)

    @property
    def params(self) -> int:
        return sum(e.params for e in self.entries)

    @property
    def macs(self) -> int:
        return sum(e.macs for e in self.entries)

    @property
    def gflops(self) -> float:
        return 2.0 * self.macs / 1e9

    def group_params(self, group: str) -> int:
        return sum(e.params for e in self.entries if e.group == group)

    def group_macs(self, group: str) -> int:
        return sum(e.macs for e in self.entries if e.group == group)

    def to_text(self, detail: bool = True) -> str:
        lines = [
            f"input_size = {self.input_size[0]}x{self.input_size[1]}",
            f"total.params = {self.params}",
            f"total.macs = {self.macs}",
            f"total.gflops = {self.gflops:.9f}",
        ]
        for g in GROUPS:
            lines.append(f"group.{g}.params = {self.group_params(g)}")
            lines.append(f"group.{g}.macs = {self.group_macs(g)}")
        if detail:
            for e in self.entries:
                lines.append(f"module.{e.name}.params = {e.params}")
                lines.append(f"module.{e.name}.macs = {e.macs}")
        return "\n".join(lines) + "\n"


def profile(model: SegNet, input_size: tuple[int, int] | None = None) -> ProfileReport:
    """Profile ``model``; ``input_size`` overrides the configured one for MACs only."""
    cfg = model.config
    size = tuple(input_size or cfg.input_size)
    names = {id(m): name for name, m in model.named_modules()}

    saved_cfg = model.config
    was_training = model.training
    if size != tuple(cfg.input_size):
        model.config = replace(cfg, input_size=size)
    try:
        model.eval()
        x = np.zeros((1, size[0], size[1], cfg.in_channels))
        with no_grad(), _macs.counting() as counter:
            model(x)
    finally:
        model.config = saved_cfg
        model.train(was_training)

    unscoped = counter.pop(None, 0)
    if unscoped:
        counter[id(model)] += unscoped
    entries = []
    for name, mod in model.named_modules():
        params = mod.own_param_count()
        macs = counter.get(id(mod), 0)
        if params or macs:
            entries.append(ProfileEntry(name or "model", params, macs))
    missing = set(counter) - set(names)
    if missing:
        raise RuntimeError("MACs recorded for modules outside the model tree")
    return ProfileReport(size, entries)
