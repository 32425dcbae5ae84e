"""Two-stage trainer, checkpoint serialization, and the run log.

Stage 1 pre-trains the visual projection under the interaction-matrix
head (with a throwaway textual projection); only the visual projection is
carried forward. Stage 2 freezes it and trains the textual and phi
projections jointly with the fusion head. Both stages minimize binary
cross-entropy with a decoupled-weight-decay adaptive optimizer.

Everything is seed-deterministic: batch order, dropout masks, and
initializations all draw from named streams derived from the run seed, so
two identical configs produce byte-identical checkpoints and histories.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np

from .archive import read_archive, write_archive
from .backbone import load_backbone
from .errors import (
    ArgumentError,
    CompatibilityError,
    ConfigError,
    TrainingDivergedError,
)
from .eval import auroc
from .fusion import InteractionHeadParams
from .adapters import ProjectionParams
from .inversion import PromptTemplate, load_phi
from .model import MemeClassifier, RecordFeatures
from .nn import AdamW, derive_seed, derived_rng, sigmoid

BCE_EPS = 1e-7


def bce_loss(probs, labels) -> float:
    """Mean binary cross-entropy with probabilities clamped to [eps, 1-eps]."""
    p = np.clip(np.asarray(probs, dtype=np.float64), BCE_EPS, 1.0 - BCE_EPS)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise ArgumentError(f"probs shape {p.shape} != labels shape {y.shape}")
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))


def bce_with_logits(logits, labels):
    """(loss, dloss/dlogits). The gradient is the exact unclamped one,
    (p - y)/n, which stays finite everywhere; clamping only guards the
    reported loss value."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    p = sigmoid(z)
    loss = bce_loss(p, y)
    return loss, (p - y) / max(1, z.size)


class RunLog:
    """Line-delimited JSON event stream. The only artifact with timestamps."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "a", encoding="utf-8")

    def event(self, **fields):
        fields.setdefault("timestamp", time.time())
        self._fh.write(json.dumps(fields, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()


class FeatureStore:
    """Frozen-encoder outputs per record, computed once and reused."""

    def __init__(self, model: MemeClassifier, root=None):
        self.model = model
        self.root = root
        self._by_id: dict[str, RecordFeatures] = {}

    def get(self, record, with_ti_text: bool = False) -> RecordFeatures:
        feats = self._by_id.get(record.id)
        if feats is None:
            feats = self.model.prepare_record(record, root=self.root, with_ti_text=with_ti_text)
            self._by_id[record.id] = feats
        elif with_ti_text and feats.ti_text_raw is None:
            fresh = self.model.prepare_record(record, root=self.root, with_ti_text=True)
            feats.ti_text_raw = fresh.ti_text_raw
        return feats

    def batch(self, records, with_ti_text: bool = False) -> list:
        return [self.get(r, with_ti_text=with_ti_text) for r in records]


def train_step(feats: list, labels, model: MemeClassifier, optim: AdamW,
               rng=None) -> float:
    """One forward/backward/update over a batch; returns the batch loss."""
    if not feats:
        raise ArgumentError("empty batch")
    model.zero_grad()
    logits = model.forward_features(feats, train=True, rng=rng)
    loss, dlogits = bce_with_logits(logits, labels)
    if not np.isfinite(loss):
        raise TrainingDivergedError(f"non-finite loss {loss}")
    model.backward_features(dlogits)
    optim.step()
    return loss


def _epoch_batches(n: int, batch_size: int, rng) -> list:
    order = rng.permutation(n)
    return [order[lo: lo + batch_size] for lo in range(0, n, batch_size)]


def _run_epochs(model, feats, labels, optim, *, epochs, batch_size, seed, stage,
                history, log=None, select_feats=None, select_labels=None,
                max_steps=None, step_offset=0):
    """Shared epoch loop. Tracks the best selection AUROC when a selection
    split is given; returns (best_state, steps_run)."""
    batch_rng = derived_rng(seed, f"stage{stage}:batches")
    drop_rng = derived_rng(seed, f"stage{stage}:dropout")
    n = len(feats)
    step = step_offset
    best = None  # (auroc, state dict)
    for epoch in range(epochs):
        losses = []
        for idx in _epoch_batches(n, batch_size, batch_rng):
            batch = [feats[i] for i in idx]
            y = labels[idx]
            loss = train_step(batch, y, model, optim, rng=drop_rng)
            step += 1
            losses.append(loss)
            if log is not None:
                log.event(step=step, stage=stage, loss=loss, lr=optim.lr)
            if max_steps is not None and step - step_offset >= max_steps:
                break
        entry = {"stage": stage, "epoch": epoch + 1, "step": step,
                 "train_loss": float(np.mean(losses))}
        if select_feats:
            scores = model.predict_proba(select_feats)
            sel_auc = auroc(scores, select_labels)
            entry["selection_auroc"] = float(sel_auc)
            if best is None or sel_auc > best[0]:
                best = (sel_auc, _snapshot(model), epoch + 1)
        history.append(entry)
        if max_steps is not None and step - step_offset >= max_steps:
            break
    return best, step - step_offset


def _snapshot(model: MemeClassifier) -> dict:
    return {name: {k: v.copy() for k, v in comp.state_tensors().items()}
            for name, comp in model.trainable_components().items()}


def _restore(model: MemeClassifier, state: dict) -> None:
    for name, tensors in state.items():
        model.trainable_components()[name].load_state(tensors)


def stage2_trainables(model: MemeClassifier, config) -> list:
    """Parameter list for the fusion stage, honoring the ablation flags."""
    mods = [model.textual_proj] + model.fusion_modules()
    if model.phi_proj is not None:
        mods.append(model.phi_proj)
    two_stage = config["ablation"]["use_two_stage"]
    if not two_stage or config["train"]["finetune_visual_proj"]:
        mods.append(model.visual_proj)
    params = []
    for m in mods:
        params.extend(m.params())
    return params


def train_stage1(model: MemeClassifier, train_feats, train_labels, config,
                 out_dir=None, log=None, history=None, max_steps=None):
    """Pre-train visual_proj under the interaction head on raw text features.

    The textual projection and interaction head used here are throwaways;
    the carried-forward artifact is visual_proj alone. Textual inversion is
    deliberately absent: the pseudo-token statistics belong to stage 2.
    """
    history = history if history is not None else []
    d = model.backbone.meta.d
    seed = model.seed
    scaffold_txt = ProjectionParams(d, model.p, "textual_proj", "seeded_uniform",
                                    derive_seed(seed, "stage1:textual_proj"))
    scaffold_head = InteractionHeadParams(model.p, hidden=config["model"]["interaction_hidden"],
                                          seed=derive_seed(seed, "stage1:interaction"))
    proxy = _Stage1Proxy(model, scaffold_txt, scaffold_head)
    model.visual_proj.set_frozen(False)
    params = model.visual_proj.params() + scaffold_txt.params() + scaffold_head.params()
    optim = AdamW(params, lr=config["train"]["lr"],
                  weight_decay=config["train"]["weight_decay"])
    _run_epochs(proxy, train_feats, train_labels, optim,
                epochs=config["train"]["stage1_epochs"],
                batch_size=config["train"]["batch_size"],
                seed=seed, stage=1, history=history, log=log, max_steps=max_steps)
    ckpt_path = None
    if out_dir is not None:
        ckpt_path = Path(out_dir) / "stage1"
        save_checkpoint(ckpt_path, model, config, stage="stage1", history=history,
                        components=("visual_proj",))
    return ckpt_path, history


class _Stage1Proxy:
    """Adapter giving the stage-1 scaffold the train_step interface.

    Routes raw text features through the throwaway textual projection and
    the interaction head while reusing the model's visual projection.
    """

    def __init__(self, model, textual_proj, interaction):
        self.model = model
        self.textual_proj = textual_proj
        self.interaction = interaction
        self._active = False

    def zero_grad(self):
        self.model.visual_proj.zero_grad()
        self.textual_proj.zero_grad()
        self.interaction.zero_grad()

    def forward_features(self, feats, train=False, rng=None):
        visual_raw = np.stack([f.visual_raw for f in feats])
        text_raw = np.stack([f.text_raw for f in feats])
        img = self.model.visual_proj.forward(visual_raw)
        txt = self.textual_proj.forward(text_raw)
        self._active = True
        return np.asarray(self.interaction.forward(txt, img), dtype=np.float64)

    def backward_features(self, dlogits):
        if not self._active:
            raise ArgumentError("backward before forward")
        dtxt, dimg = self.interaction.backward(dlogits)
        self.textual_proj.backward(dtxt)
        self.model.visual_proj.backward(dimg)
        self._active = False

    def predict_proba(self, feats):
        logits = self.forward_features(feats, train=False)
        self._active = False
        return sigmoid(logits)


def train_stage2(model: MemeClassifier, train_feats, train_labels, config,
                 select_feats=None, select_labels=None, out_dir=None, log=None,
                 history=None, max_steps=None, stage1_manifest=None):
    """Train the fusion stack with visual_proj frozen (two-stage mode)."""
    history = history if history is not None else []
    if stage1_manifest is not None:
        _check_stage1_compatible(stage1_manifest, config)
    two_stage = config["ablation"]["use_two_stage"]
    finetune = config["train"]["finetune_visual_proj"]
    model.visual_proj.set_frozen(two_stage and not finetune)
    params = stage2_trainables(model, config)
    optim = AdamW(params, lr=config["train"]["lr"],
                  weight_decay=config["train"]["weight_decay"])
    best, _ = _run_epochs(model, train_feats, train_labels, optim,
                          epochs=config["train"]["stage2_epochs"],
                          batch_size=config["train"]["batch_size"],
                          seed=model.seed, stage=2, history=history, log=log,
                          select_feats=select_feats, select_labels=select_labels,
                          max_steps=max_steps)
    if best is not None:
        _restore(model, best[1])
        history.append({"stage": 2, "selected_epoch": best[2],
                        "selection_auroc": float(best[0])})
    ckpt_path = None
    if out_dir is not None:
        ckpt_path = Path(out_dir) / "final"
        save_checkpoint(ckpt_path, model, config, stage="full", history=history)
    return ckpt_path, history


def _check_stage1_compatible(stage1_manifest, config) -> None:
    meta = stage1_manifest.get("meta", {})
    if meta.get("stage") != "stage1":
        raise CompatibilityError(f"expected a stage1 checkpoint, got stage {meta.get('stage')!r}")
    theirs = meta.get("config", {})
    # Training hyperparameters may legitimately differ between stages; the
    # architecture-defining sections may not.
    for key in ("backbone", "phi", "model", "ablation"):
        if theirs.get(key) != config.get(key):
            raise CompatibilityError(
                f"stage-1 checkpoint config section '{key}' does not match: "
                f"{theirs.get(key)} vs {config.get(key)}"
            )


# -- checkpoint serialization ------------------------------------------------


def save_checkpoint(path, model: MemeClassifier, config, stage: str, history,
                    components=None) -> Path:
    """Write a checkpoint archive: trainable tensors + frozen references.

    The manifest lists every component; frozen encoders are stored by
    (kind, source, hash) reference instead of duplicating their weights.
    """
    from .config import config_hash

    path = Path(path)
    trainable = model.trainable_components()
    if components is None:
        components = tuple(trainable)
    tensors = {}
    component_tensors = {}
    for name in components:
        comp_tensors = trainable[name].state_tensors()
        component_tensors[name] = sorted(comp_tensors)
        tensors.update(comp_tensors)
    frozen_refs = {
        "backbone": {
            "kind": config["backbone"]["kind"],
            "source": config["backbone"]["source"],
            "hash": model.backbone.state_hash(),
        },
    }
    if model.phi is not None:
        frozen_refs["phi"] = {
            "kind": config["phi"]["kind"],
            "source": config["phi"]["source"],
            "hash": model.phi.state_hash(),
        }
    meta = {
        "stage": stage,
        "config": config,
        "config_hash": config_hash(config),
        "metric_history": history,
        "components": component_tensors,
        "all_components": sorted(model.components()),
        "frozen_refs": frozen_refs,
    }
    return write_archive(path, tensors, kind="checkpoint", meta=meta)


def build_model(config, backbone=None, phi=None) -> MemeClassifier:
    """Construct the classifier (and its frozen parts) from a resolved config."""
    seed = config["train"]["seed"]
    if backbone is None:
        backbone = load_backbone(config["backbone"]["kind"], config["backbone"]["source"],
                                 seed=config["backbone"]["seed"])
    phi_needed = config["ablation"]["use_textual_inversion"]
    if phi is None and phi_needed:
        phi = load_phi(config["phi"]["kind"], config["phi"]["source"],
                       d=backbone.meta.d, w=backbone.meta.w, seed=config["phi"]["seed"])
    template = PromptTemplate(prefix=config["model"]["prompt_prefix"],
                              separator=config["model"]["prompt_separator"])
    return MemeClassifier(
        backbone, phi,
        p=config["model"]["p"], h=config["model"]["h"], seed=seed,
        use_combiner=config["ablation"]["use_combiner"],
        use_textual_inversion=phi_needed,
        phi_proj_placement=config["model"]["phi_proj_placement"],
        combiner_activation=config["model"]["combiner_activation"],
        head_dropout=config["model"]["head_dropout"],
        interaction_hidden=config["model"]["interaction_hidden"],
        template=template,
    )


def load_checkpoint(path, backbone=None, phi=None):
    """Rebuild a model from a checkpoint archive; verifies blob integrity
    and that re-resolved frozen components hash to the stored references."""
    path = Path(path)
    manifest, tensors = read_archive(path)
    if manifest.get("kind") != "checkpoint":
        raise CompatibilityError(f"archive at {path} has kind {manifest.get('kind')!r}, expected 'checkpoint'")
    meta = manifest["meta"]
    config = meta["config"]
    model = build_model(config, backbone=backbone, phi=phi)
    refs = meta.get("frozen_refs", {})
    if "backbone" in refs and model.backbone.state_hash() != refs["backbone"]["hash"]:
        raise CompatibilityError("backbone weights do not match the checkpoint's reference hash")
    if "phi" in refs and model.phi is not None and model.phi.state_hash() != refs["phi"]["hash"]:
        raise CompatibilityError("phi weights do not match the checkpoint's reference hash")
    trainable = model.trainable_components()
    for name, tensor_names in meta["components"].items():
        comp = trainable.get(name)
        if comp is None:
            raise CompatibilityError(f"checkpoint lists component '{name}' the config does not build")
        comp.load_state({k: tensors[k] for k in tensor_names})
    return model, manifest


# -- orchestration -------------------------------------------------------------


def load_splits(config) -> dict:
    """Resolve the configured data source into named record splits."""
    from . import data

    source = config["data"]["source"]
    if source == "synthetic":
        full = data.generate_synthetic_confounders(
            config["data"]["n_synthetic"], config["data"]["synthetic_seed"])
        return data.split_synthetic(full)
    root = config["data"]["root"]
    if root is None:
        raise ConfigError("data.root", f"data source '{source}' requires data.root")
    if source == "hmc":
        return {s: data.load_hmc_split(root, s) for s in data.HMC_SPLITS}
    if source == "harmeme":
        splits = {s: data.load_harmeme_split(root, s) for s in data.HARMEME_SPLITS}
        train = splits["train"]
        k = max(1, len(train.records) // 10)
        rng = derived_rng(config["train"]["seed"], "harmeme:holdout")
        order = rng.permutation(len(train.records))
        hold_idx = set(order[:k].tolist())
        hold = tuple(r for i, r in enumerate(train.records) if i in hold_idx)
        rest = tuple(r for i, r in enumerate(train.records) if i not in hold_idx)
        splits["train"] = data.DatasetSplit(name="train", records=rest, source="harmeme")
        splits["holdout"] = data.DatasetSplit(name="holdout", records=hold, source="harmeme")
        return splits
    raise ConfigError("data.source", f"unknown data source {source!r}")


def selection_split_name(config) -> str | None:
    configured = config["data"]["selection_split"]
    if configured is not None:
        return configured
    source = config["data"]["source"]
    return {"synthetic": "holdout", "hmc": "dev_seen", "harmeme": "holdout"}.get(source)


def train_all(config, out_dir, stage: str = "all", log: RunLog | None = None,
              splits=None, model=None):
    """Full training pipeline per config; returns paths, history, and model."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    own_log = log is None
    if own_log:
        log = RunLog(out_dir / "run.log")
    try:
        if splits is None:
            splits = load_splits(config)
        if model is None:
            model = build_model(config)
        store = FeatureStore(model, root=config["data"]["root"])
        train_records = splits["train"].records
        train_feats = store.batch(train_records)
        train_labels = np.array([r.label for r in train_records], dtype=np.float64)
        sel_name = selection_split_name(config)
        select_feats = select_labels = None
        if sel_name is not None and sel_name in splits:
            sel_records = [r for r in splits[sel_name].records if r.label is not None]
            if sel_records:
                select_feats = store.batch(sel_records)
                select_labels = np.array([r.label for r in sel_records], dtype=np.float64)
        history: list = []
        stage1_path = None
        two_stage = config["ablation"]["use_two_stage"]
        if two_stage and stage in ("1", "all"):
            stage1_path, history = train_stage1(
                model, train_feats, train_labels, config, out_dir=out_dir, log=log,
                history=history)
        final_path = None
        if stage in ("2", "all"):
            stage1_manifest = None
            if two_stage and stage == "2":
                stage1_manifest, _ = _read_stage1(out_dir)
                model, _ = load_checkpoint(out_dir / "stage1",
                                           backbone=model.backbone, phi=model.phi)
                store = FeatureStore(model, root=config["data"]["root"])
                train_feats = store.batch(train_records)
                if select_feats is not None:
                    select_feats = store.batch(sel_records)
            final_path, history = train_stage2(
                model, train_feats, train_labels, config,
                select_feats=select_feats, select_labels=select_labels,
                out_dir=out_dir, log=log, history=history,
                stage1_manifest=stage1_manifest)
        return {"stage1": stage1_path, "final": final_path, "history": history,
                "model": model, "splits": splits, "store": store}
    finally:
        if own_log:
            log.close()


def _read_stage1(out_dir):
    from .archive import read_manifest

    path = Path(out_dir) / "stage1"
    manifest = read_manifest(path)
    return manifest, path
