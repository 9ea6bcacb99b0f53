"""Experiment orchestration: training, evaluation, inference, sweeps.

Everything here is deterministic given a seed in single-threaded mode:
model initialization is driven by torch.manual_seed, batch order by
per-epoch shuffle seeds, and occlusion resampling by per-(ratio, sample)
numpy generators, so resumed or repeated runs retrace the same steps.

Checkpoints are torch archives holding plain dictionaries: a schema tag, a
kind ("prior" or "lifting"), the resolved config echo, model/optimizer
state, and the loss history. Nothing in them requires pickled custom
classes, so they load with weights_only=True.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import yaml

from .body_model import BodyModel
from .data_pipeline import (
    DetectionData,
    GenerationConfig,
    collate_batch,
    make_batches,
)
from .errors import ConfigError, DataError, TranslationSolveError
from .global_fit import solve_translation
from .lifting_net import LiftingConfig, LiftingNet, LossWeights, loss_motion
from .metrics import accel_error, mpjpe, pa_mpjpe, pve
from .motion_repr import rot6d_to_matrix
from .occlusion_synth import OcclusionConfig, calibrate_tracks
from .prior_net import PriorConfig, PriorNet, loss_self

log = logging.getLogger("occmocap")

CHECKPOINT_SCHEMA = "occmocap-checkpoint/v1"
OUTPUT_SCHEMA = "motion-output/v1"


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 32
    epochs: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("lr must be > 0, batch_size >= 1, epochs >= 0")


def set_determinism(seed: int):
    """Single-threaded, seeded torch state for bit-reproducible runs."""
    torch.manual_seed(seed)
    torch.set_num_threads(1)


# ---------------------------------------------------------------------------
# config file handling

_SECTIONS = {
    "data": GenerationConfig,
    "occlusion": OcclusionConfig,
    "prior": PriorConfig,
    "lifting": LiftingConfig,
    "train_prior": TrainConfig,
    "train_lifting": TrainConfig,
    "loss_weights": LossWeights,
}


def _build_section(cls, values, section):
    values = dict(values or {})
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown keys in config section '{section}': {unknown}")
    for key, val in values.items():
        if isinstance(val, list):
            values[key] = tuple(val)
    return cls(**values)


def load_config_file(path):
    """Parse the YAML experiment config into dataclass sections.

    Recognized top-level sections: data (with nested occlusion), prior,
    lifting, train_prior, train_lifting, loss_weights, seed. Unknown keys
    anywhere raise ConfigError.
    """
    try:
        raw = yaml.safe_load(Path(path).read_text()) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML in {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a mapping, got {type(raw).__name__}")
    unknown = sorted(set(raw) - set(_SECTIONS) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown top-level config sections: {unknown}")
    out = {"seed": int(raw.get("seed", 0)), "_present": frozenset(raw)}
    data_section = dict(raw.get("data") or {})
    occ = data_section.pop("occlusion", None)
    gen = _build_section(GenerationConfig, data_section, "data")
    if occ is not None:
        gen.occlusion = _build_section(OcclusionConfig, occ, "data.occlusion")
    out["data"] = gen
    for name in ("prior", "lifting", "train_prior", "train_lifting", "loss_weights"):
        if name == "data":
            continue
        out[name] = _build_section(_SECTIONS[name], raw.get(name), name)
    return out


def config_echo(**sections):
    """Plain-dict snapshot of dataclass config sections for embedding in
    checkpoints and reports."""
    echo = {}
    for name, value in sections.items():
        echo[name] = dataclasses.asdict(value) if dataclasses.is_dataclass(value) else value
    return echo


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, kind, model, optimizer=None, config=None,
                    history=None, epoch=0):
    if kind not in ("prior", "lifting"):
        raise ConfigError(f"unknown checkpoint kind {kind!r}")
    payload = {
        "schema": CHECKPOINT_SCHEMA,
        "kind": kind,
        "config": config or {},
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "history": history or [],
        "epoch": int(epoch),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path, expected_kind=None):
    import pickle
    import zipfile
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError,
            zipfile.BadZipFile) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("schema") != CHECKPOINT_SCHEMA:
        raise DataError(f"{path} is not a {CHECKPOINT_SCHEMA} archive")
    if expected_kind and payload["kind"] != expected_kind:
        raise ConfigError(
            f"checkpoint {path} holds {payload['kind']!r} weights, expected {expected_kind!r}"
        )
    return payload


def prior_from_checkpoint(payload) -> PriorNet:
    cfg = _build_section(PriorConfig, payload["config"].get("prior"), "prior")
    net = PriorNet(cfg)
    net.load_state_dict(payload["model_state"])
    return net


def lifting_from_checkpoint(payload) -> LiftingNet:
    prior_cfg = _build_section(PriorConfig, payload["config"].get("prior"), "prior")
    lift_cfg = _build_section(LiftingConfig, payload["config"].get("lifting"), "lifting")
    net = LiftingNet(PriorNet(prior_cfg), lift_cfg)
    net.load_state_dict(payload["model_state"])
    return net


# ---------------------------------------------------------------------------
# training loops

def train_prior_model(samples, net: PriorNet, tcfg: TrainConfig,
                      optimizer=None, start_epoch=0, history=None):
    """Masked-completion training. Returns (optimizer, history); history has
    one row per epoch plus per-batch losses."""
    if not samples:
        raise DataError("prior training needs at least one sample")
    optimizer = optimizer or torch.optim.AdamW(
        net.parameters(), lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    history = list(history or [])
    net.train()
    for epoch in range(start_epoch, tcfg.epochs):
        batch_losses = []
        for batch in make_batches(samples, tcfg.batch_size, shuffle_seed=tcfg.seed + epoch):
            tensors = collate_batch(batch)
            pred, _ = net(tensors["clean2d"], tensors["mask"])
            loss = loss_self(pred, tensors["clean2d"], tensors["mask"])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            batch_losses.append(float(loss.detach()))
        history.append({"epoch": epoch, "loss": float(np.mean(batch_losses)),
                        "batches": batch_losses})
        log.info("prior epoch %d: masked L1 %.6f", epoch, history[-1]["loss"])
    return optimizer, history


def train_lifting_model(samples, net: LiftingNet, body: BodyModel,
                        tcfg: TrainConfig, weights: LossWeights = None,
                        freeze_prior=False, optimizer=None, start_epoch=0,
                        history=None):
    """Lifting training with the combined motion loss; the prior is finetuned
    jointly unless freeze_prior is set."""
    if not samples:
        raise DataError("lifting training needs at least one sample")
    weights = weights or LossWeights()
    for p in net.prior.parameters():
        p.requires_grad_(not freeze_prior)
    trainable = [p for p in net.parameters() if p.requires_grad]
    optimizer = optimizer or torch.optim.AdamW(
        trainable, lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    history = list(history or [])
    net.train()
    for epoch in range(start_epoch, tcfg.epochs):
        batch_losses = []
        terms_sum = None
        for batch in make_batches(samples, tcfg.batch_size, shuffle_seed=tcfg.seed + epoch):
            tensors = collate_batch(batch)
            out = net(tensors["clean2d"], tensors["mask"])
            loss, terms = loss_motion(out, tensors["gt3d"], tensors["beta"], body, weights)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            batch_losses.append(terms["total"])
            terms_sum = terms if terms_sum is None else {
                k: terms_sum[k] + terms[k] for k in terms}
        n = len(batch_losses)
        history.append({
            "epoch": epoch,
            "loss": float(np.mean(batch_losses)),
            "terms": {k: v / n for k, v in terms_sum.items()},
        })
        log.info("lifting epoch %d: loss %.6f (%s)", epoch, history[-1]["loss"],
                 " ".join(f"{k} {v:.4f}" for k, v in history[-1]["terms"].items()))
    return optimizer, history


def write_loss_log(path, history):
    lines = ["# epoch loss"]
    for row in history:
        lines.append(f"{row['epoch']} {row['loss']:.8f}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# evaluation

def _predict_sample(net: LiftingNet, clean2d, mask):
    """Forward one sequence of arbitrary length by windowing to the model's
    frame count (edge-replicating the tail window)."""
    window = net.prior.cfg.num_frames
    frames = clean2d.shape[0]
    clean_t = torch.as_tensor(clean2d, dtype=torch.float32)
    mask_t = torch.as_tensor(np.asarray(mask, dtype=bool))
    chunks = []
    for start in range(0, frames, window):
        end = min(start + window, frames)
        c = clean_t[start:end]
        m = mask_t[start:end]
        if end - start < window:
            pad = window - (end - start)
            c = torch.cat([c, c[-1:].expand(pad, -1, -1)], dim=0)
            m = torch.cat([m, m[-1:].expand(pad, -1)], dim=0)
        chunks.append((c, m, end - start))
    batch_c = torch.stack([c for c, _, _ in chunks])
    batch_m = torch.stack([m for _, m, _ in chunks])
    with torch.no_grad():
        out = net(batch_c, batch_m)
    map3d = torch.cat(
        [out.map3d[i, :valid] for i, (_, _, valid) in enumerate(chunks)], dim=0)
    beta = out.beta.mean(dim=0)
    return map3d, beta


def posed_body(body: BodyModel, map3d, beta):
    """Decode a (F, N, 6) map + beta through the body model. Returns numpy
    (vertices (F, V, 3), joints (F, N, 3), lsp_joints (F, 14, 3))."""
    map3d = torch.as_tensor(map3d, dtype=body.template_vertices.dtype)
    beta = torch.as_tensor(beta, dtype=body.template_vertices.dtype)
    with torch.no_grad():
        rot = rot6d_to_matrix(map3d)
        verts, joints = body(rot, beta, validate=False)
        lsp = body.regress_joints_lsp(verts)
    return verts.numpy(), joints.numpy(), lsp.numpy()


def evaluate_lifting(net: LiftingNet, samples, body: BodyModel,
                     masks=None) -> tuple:
    """Per-sequence and aggregate metrics on held-out samples.

    The model sees the occluded map (sample.mask, or an override from
    ``masks``); errors are measured against the ground-truth parameters run
    through the same body model. Returns (per_sequence, aggregate).
    """
    if not samples:
        raise DataError("evaluation needs at least one sample")
    net.eval()
    per_seq = {}
    for i, sample in enumerate(samples):
        mask = sample.mask if masks is None else masks[i]
        map3d, beta = _predict_sample(net, sample.clean2d, mask)
        pv, pj, plsp = posed_body(body, map3d, beta)
        gv, gj, glsp = posed_body(body, sample.gt3d, sample.beta)
        name = sample.name or f"seq{i:05d}"
        per_seq[name] = {
            "mpjpe": mpjpe(plsp, glsp),
            "pa_mpjpe": pa_mpjpe(plsp, glsp),
            "pve": pve(pv, gv, pred_root=pj[:, 0], gt_root=gj[:, 0]),
            "accel": accel_error(plsp, glsp),
        }
    aggregate = {
        m: float(np.mean([vals[m] for vals in per_seq.values()]))
        for m in ("mpjpe", "pa_mpjpe", "pve", "accel")
    }
    return per_seq, aggregate


# ---------------------------------------------------------------------------
# inference on detector output

def run_inference(det: DetectionData, net: LiftingNet, body: BodyModel,
                  smoothness_weight=100.0):
    """Full pipeline on ingested detections: network forward, body decode,
    global translation fit. Confidence weights for the fit keep the
    detector's values on visible joints and zero out occluded ones.

    Returns a dict of arrays; "translations" is None (with a warning logged)
    when the translation fit is unsolvable.
    """
    map3d, beta = _predict_sample(net, det.occluded2d, det.mask)
    verts, joints, lsp = posed_body(body, map3d, beta)
    weights = np.where(det.mask, 0.0, det.confidence)
    result = {
        "map3d": map3d.numpy().astype(np.float64),
        "beta": beta.numpy().astype(np.float64),
        "vertices": verts.astype(np.float64),
        "joints": joints.astype(np.float64),
        "lsp_joints": lsp.astype(np.float64),
        "translations": None,
        "converged": False,
    }
    try:
        solve = solve_translation(lsp.astype(np.float64), det.pixels, weights,
                                  det.intrinsics, smoothness_weight=smoothness_weight)
        result["translations"] = solve.track.T
        result["converged"] = bool(solve.converged)
    except TranslationSolveError as exc:
        log.warning("translation fit unsolvable (%s); writing local-frame output", exc)
    return result


def save_motion_output(path, result, threshold):
    arrays = {
        "schema": np.array(OUTPUT_SCHEMA),
        "map3d": result["map3d"],
        "beta": result["beta"],
        "vertices": result["vertices"],
        "joints": result["joints"],
        "lsp_joints": result["lsp_joints"],
        "converged": np.bool_(result["converged"]),
        "threshold": np.float64(threshold),
    }
    if result["translations"] is not None:
        arrays["translations"] = result["translations"]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **arrays)


def load_motion_output(path):
    data = np.load(Path(path), allow_pickle=False)
    if "schema" not in data or str(data["schema"]) != OUTPUT_SCHEMA:
        raise DataError(f"{path} is not a {OUTPUT_SCHEMA} archive")
    return {key: data[key] for key in data.files if key != "schema"}


# ---------------------------------------------------------------------------
# occlusion-sensitivity sweep

def sensitivity_sweep(variants, samples, body: BodyModel,
                      ratios=(0.0, 0.1, 0.2, 0.3, 0.4, 0.5), seed=0):
    """Evaluate each model variant under resynthesized occlusion ratios.

    variants: {label: LiftingNet}. For every ratio the same per-sample masks
    are reused across variants (generators keyed by (seed, ratio, index)),
    so curves differ only by model. Returns rows
    [{"ratio", "variant", "mpjpe", "pa_mpjpe"}].
    """
    rows = []
    for ratio in ratios:
        occ = OcclusionConfig(target_ratio=float(ratio))
        masks = []
        for i, sample in enumerate(samples):
            rng = np.random.default_rng([seed, int(round(ratio * 100)), i])
            _, mask = calibrate_tracks(sample.clean2d, occ, rng)
            masks.append(mask)
        for label, net in variants.items():
            _, agg = evaluate_lifting(net, samples, body, masks=masks)
            rows.append({"ratio": float(ratio), "variant": label,
                         "mpjpe": agg["mpjpe"], "pa_mpjpe": agg["pa_mpjpe"]})
            log.info("sweep ratio %.1f %s: mpjpe %.2f pa %.2f",
                     ratio, label, agg["mpjpe"], agg["pa_mpjpe"])
    return rows


def write_sweep_table(path, rows):
    lines = ["# ratio variant mpjpe pa_mpjpe"]
    for row in rows:
        lines.append(
            f"{row['ratio']:.2f} {row['variant']} {row['mpjpe']:.6f} {row['pa_mpjpe']:.6f}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_sweep_table(path):
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        ratio, variant, mp, pa = line.split()
        rows.append({"ratio": float(ratio), "variant": variant,
                     "mpjpe": float(mp), "pa_mpjpe": float(pa)})
    return rows


def plot_sweep(path, rows):
    """Line plot of MPJPE against occlusion ratio, one line per variant."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    variants = sorted({row["variant"] for row in rows})
    fig, ax = plt.subplots(figsize=(6, 4))
    for label in variants:
        pts = sorted(
            [(r["ratio"], r["mpjpe"]) for r in rows if r["variant"] == label])
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=label)
    ax.set_xlabel("occlusion ratio")
    ax.set_ylabel("MPJPE (mm)")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
