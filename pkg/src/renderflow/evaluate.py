"""Model evaluation and the ablation runner.

Every suite trains its variants from one shared seed and evaluates them on
the same sequences, then reports rows named after the comparison they
mirror plus direction checks. The perceptual column is the structural
proxy, never LPIPS.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from renderflow.bridge import BridgeConfig
from renderflow.data import sequence_arrays
from renderflow.errors import InvalidArgumentError
from renderflow.infer import InferConfig, NetVelocity, render_independent, render_progressive, render_with_keyframes
from renderflow.metrics import PROXY_NOTE, evaluate_frames, jsonable, merge_reports, rows_to_csv, rows_to_text
from renderflow.model import NetConfig
from renderflow.train import TrainConfig, train_stage1, train_stage2, with_keyframe_design

SUITES = ("schedules", "pixel_losses", "keyframe_designs", "keyframe_gaps", "inference_steps")
GAP_STUDY = (13, 17, 25, 49)


def evaluate_model(model, sequences, config: InferConfig = None, keyframe_gap=None, progressive=True):
    """Render each sequence and pool per-frame metrics.

    With ``keyframe_gap`` ground-truth keyframes at {0, gap, ...} are given
    to the model and the non-keyframe aggregates exclude those frames.
    """
    cfg = config or InferConfig()
    reports = []
    for seq in sequences:
        arr = sequence_arrays(seq)
        keys = ()
        if keyframe_gap:
            keys = np.arange(0, len(arr), keyframe_gap)
            res = render_with_keyframes(model, arr, arr.reference[keys], keys, cfg, progressive=progressive)
        elif progressive:
            res = render_progressive(model, arr, cfg)
        else:
            res = render_independent(model, arr, cfg)
        reports.append(evaluate_frames(res.images, arr.reference, keys))
    return merge_reports(reports, meta={"infer": cfg.to_dict(), "keyframe_gap": keyframe_gap,
                                        "progressive": progressive, "sequences": len(sequences)})


def albedo_baseline(sequences):
    """Metrics of the albedo used directly as the rendered image."""
    return merge_reports([evaluate_frames(s.stack("albedo"), s.stack("reference")) for s in sequences],
                         meta={"baseline": "albedo passthrough"})


@dataclass
class AblationBudget:
    steps: int = 300
    stage2_steps: int = 200
    batch: int = 4
    lr: float = 3e-4
    warmup_steps: int = 50
    seed: int = 0
    keyframe_gap: int = 16
    net: NetConfig = field(default_factory=lambda: NetConfig(dim=64, depth=4, patch=8))
    gaps: tuple = GAP_STUDY

    def __post_init__(self):
        if isinstance(self.net, dict):
            self.net = NetConfig(**self.net)
        if self.steps < 1 or self.stage2_steps < 1:
            raise InvalidArgumentError("ablation budgets need at least one training step")

    def train_config(self, **over) -> TrainConfig:
        base = dict(lr=self.lr, steps=self.steps, batch=self.batch, warmup_steps=self.warmup_steps,
                    seed=self.seed, keyframe_gap=self.keyframe_gap)
        base.update(over)
        return TrainConfig(**base)

    def to_dict(self):
        d = asdict(self)
        d["net"], d["gaps"] = self.net.to_dict(), list(self.gaps)
        return d


@dataclass
class AblationTable:
    suite: str
    rows: list
    checks: list
    meta: dict

    def to_dict(self):
        return jsonable({"suite": self.suite, "rows": self.rows, "direction_checks": self.checks,
                         "meta": self.meta})

    def row(self, name):
        for r in self.rows:
            if r["name"] == name:
                return r
        raise KeyError(name)

    def to_csv(self):
        return rows_to_csv(self.rows)

    def to_text(self):
        cols = [c for c in ("name", "psnr", "ssim", "perceptual_proxy", "psnr_non_keyframe",
                            "ssim_non_keyframe", "perceptual_proxy_non_keyframe")
                if any(c in r for r in self.rows)]
        lines = [f"ablation: {self.suite}", rows_to_text(self.rows, cols), ""]
        lines += [f"[{'ok' if c['holds'] else 'VIOLATED'}] {c['check']}" for c in self.checks]
        lines += ["", f"note: {PROXY_NOTE}"]
        return "\n".join(lines)

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"ablation_{self.suite}.json").write_text(json.dumps(self.to_dict(), indent=2))
        (out / f"ablation_{self.suite}.csv").write_text(self.to_csv())
        (out / f"ablation_{self.suite}.txt").write_text(self.to_text() + "\n")


def _row(name, report, **extra):
    r = {"name": name}
    r.update({k: v for k, v in report.aggregate.items() if v is not None})
    r.update(extra)
    return r


def _check(text, holds):
    return {"check": text, "holds": bool(holds)}


def _ge(a, b):
    return a >= b


def _schedules(train, evals, budget):
    variants = {
        "uniform_sde": BridgeConfig(schedule="uniform"),
        "discrete_ode": BridgeConfig(sigma=0.0),
        "discrete_sde": BridgeConfig(),
    }
    models = {k: NetVelocity.from_checkpoint(train_stage1(train, budget.train_config(bridge=b), budget.net))
              for k, b in variants.items()}
    spec = [
        ("Uniform SDE (4 steps)", "uniform_sde", InferConfig(steps=4, mode="sde", rng_seed=budget.seed)),
        ("4 timesteps ODE (4 steps)", "discrete_ode", InferConfig(steps=4, mode="ode")),
        ("4 timesteps ODE (1 step)", "discrete_ode", InferConfig(steps=1, mode="ode")),
        ("4 timesteps SDE (4 steps)", "discrete_sde", InferConfig(steps=4, mode="sde", rng_seed=budget.seed)),
        ("4 timesteps SDE (1 step)", "discrete_sde", InferConfig(steps=1, mode="sde", rng_seed=budget.seed)),
    ]
    rows = [_row(name, evaluate_model(models[m], evals, cfg), train=m) for name, m, cfg in spec]
    p = {r["name"]: r["psnr"] for r in rows}
    checks = [
        _check("discrete 4-timestep SDE training (1 step) >= uniform SDE (4 steps)",
               _ge(p["4 timesteps SDE (1 step)"], p["Uniform SDE (4 steps)"])),
        _check("1-step >= 4-step inference for the SDE-trained model",
               _ge(p["4 timesteps SDE (1 step)"], p["4 timesteps SDE (4 steps)"])),
    ]
    return rows, checks


def _pixel_losses(train, evals, budget):
    spec = [
        ("L_latent only", dict(lambda_pixel=0.0, pixel_terms=())),
        ("L_latent + L_lpips (proxy)", dict(pixel_terms=("perceptual",))),
        ("L_latent + L_lpips (proxy) + L_grad", dict(pixel_terms=("perceptual", "gradient"))),
    ]
    rows = []
    for name, over in spec:
        model = NetVelocity.from_checkpoint(train_stage1(train, budget.train_config(**over), budget.net))
        rows.append(_row(name, evaluate_model(model, evals), terms=list(over.get("pixel_terms", ()))))
    p = [r["psnr"] for r in rows]
    return rows, [_check("adding the perceptual proxy does not hurt PSNR", _ge(p[1], p[0])),
                  _check("adding the gradient loss does not hurt PSNR", _ge(p[2], p[1]))]


def _stage2(train, base, budget, variant, ffn_lora):
    start = with_keyframe_design(base, variant, ffn_lora, seed=budget.seed)
    cfg = budget.train_config(stage="keyframe", steps=budget.stage2_steps)
    return NetVelocity.from_checkpoint(train_stage2(train, start, cfg))


def _keyframe_designs(train, evals, budget):
    base = train_stage1(train, budget.train_config(), budget.net)
    base_model = NetVelocity.from_checkpoint(base)
    gap = budget.keyframe_gap
    reused = _stage2(train, base, budget, "reused_query", False)
    dedicated = _stage2(train, base, budget, "dedicated_query", False)
    full = _stage2(train, base, budget, "dedicated_query", True)
    rows = [
        _row("w/o Keyframes", evaluate_model(base_model, evals, progressive=False)),
        _row("VACE progressive", evaluate_model(base_model, evals, progressive=True)),
        _row("Reused Query w/o ffn lora", evaluate_model(reused, evals, keyframe_gap=gap, progressive=False)),
        _row("Dedicated Query w/o ffn lora", evaluate_model(dedicated, evals, keyframe_gap=gap, progressive=False)),
        _row("Dedicated Query w/ ffn lora", evaluate_model(full, evals, keyframe_gap=gap, progressive=False)),
        _row("Ours + VACE progressive", evaluate_model(full, evals, keyframe_gap=gap, progressive=True)),
    ]
    p = {r["name"]: r["psnr"] for r in rows}
    checks = [
        _check("Dedicated Query w/ ffn lora >= Reused Query w/o ffn lora",
               _ge(p["Dedicated Query w/ ffn lora"], p["Reused Query w/o ffn lora"])),
        _check("Dedicated Query w/ ffn lora >= w/o Keyframes", _ge(p["Dedicated Query w/ ffn lora"], p["w/o Keyframes"])),
        _check("Ours + VACE progressive >= w/o Keyframes", _ge(p["Ours + VACE progressive"], p["w/o Keyframes"])),
    ]
    return rows, checks


def _keyframe_gaps(train, evals, budget):
    base = train_stage1(train, budget.train_config(), budget.net)
    model = _stage2(train, base, budget, "dedicated_query", True)
    rows = [_row("w/o keyframes", evaluate_model(NetVelocity.from_checkpoint(base), evals), gap=None)]
    rows += [_row(f"{g} Gap", evaluate_model(model, evals, keyframe_gap=g), gap=g) for g in budget.gaps]
    p = [r["psnr_non_keyframe"] for r in rows[1:]]
    checks = [
        _check("quality non-increasing in gap (non-keyframe PSNR)", all(a >= b for a, b in zip(p, p[1:]))),
        _check(f"{budget.gaps[0]} Gap >= w/o keyframes", _ge(rows[1]["psnr"], rows[0]["psnr"])),
    ]
    return rows, checks


def _inference_steps(train, evals, budget):
    model = NetVelocity.from_checkpoint(train_stage1(train, budget.train_config(), budget.net))
    rows = []
    for steps in (1, 2, 4):
        for mode in ("ode", "sde"):
            cfg = InferConfig(steps=steps, mode=mode, rng_seed=budget.seed)
            rows.append(_row(f"{steps} step{'s' if steps > 1 else ''} {mode.upper()}",
                             evaluate_model(model, evals, cfg), steps=steps, mode=mode))
    p = {(r["steps"], r["mode"]): r["psnr"] for r in rows}
    return rows, [_check("1-step ODE >= 4-step ODE", _ge(p[(1, "ode")], p[(4, "ode")]))]


_RUNNERS = {
    "schedules": _schedules,
    "pixel_losses": _pixel_losses,
    "keyframe_designs": _keyframe_designs,
    "keyframe_gaps": _keyframe_gaps,
    "inference_steps": _inference_steps,
}


def run_ablation(suite: str, train_sequences, eval_sequences, budget: AblationBudget = None) -> AblationTable:
    """Train and evaluate every variant of ``suite`` under one shared seed and budget.

    Direction checks are reported, not enforced: at desk scale they may not
    all hold.
    """
    if suite not in _RUNNERS:
        raise InvalidArgumentError(f"unknown ablation suite {suite!r}; expected one of {SUITES}")
    budget = budget or AblationBudget()
    if not train_sequences or not eval_sequences:
        raise InvalidArgumentError("ablation needs non-empty train and eval sequences")
    rows, checks = _RUNNERS[suite](train_sequences, eval_sequences, budget)
    meta = {"seed": budget.seed, "budget": budget.to_dict(), "proxy_note": PROXY_NOTE,
            "eval_sequences": len(eval_sequences), "train_sequences": len(train_sequences)}
    return AblationTable(suite=suite, rows=rows, checks=checks, meta=meta)


def ablation_row_names(suite: str, budget: AblationBudget = None) -> list:
    """Row names a suite emits, without running it."""
    budget = budget or AblationBudget()
    names = {
        "schedules": ["Uniform SDE (4 steps)", "4 timesteps ODE (4 steps)", "4 timesteps ODE (1 step)",
                      "4 timesteps SDE (4 steps)", "4 timesteps SDE (1 step)"],
        "pixel_losses": ["L_latent only", "L_latent + L_lpips (proxy)", "L_latent + L_lpips (proxy) + L_grad"],
        "keyframe_designs": ["w/o Keyframes", "VACE progressive", "Reused Query w/o ffn lora",
                             "Dedicated Query w/o ffn lora", "Dedicated Query w/ ffn lora",
                             "Ours + VACE progressive"],
        "keyframe_gaps": ["w/o keyframes"] + [f"{g} Gap" for g in budget.gaps],
        "inference_steps": [f"{s} step{'s' if s > 1 else ''} {m}" for s in (1, 2, 4) for m in ("ODE", "SDE")],
    }
    if suite not in names:
        raise InvalidArgumentError(f"unknown ablation suite {suite!r}; expected one of {SUITES}")
    return names[suite]
