"""The assembled classifier: frozen encoders + adapters + fusion head.

Feature flow (full model):

    image --V_E--> visual_raw --visual_proj--> i
    visual_raw --phi_proj--> phi --> pseudo token
    prompt(pseudo, text) --T_E--> text_raw --textual_proj--> t
    (t, i) --Combiner--> fused --MLP head--> logit

Ablation flags swap the Combiner+head for the interaction-matrix head
(use_combiner = false) and bypass the inversion prompt for the raw meme
text (use_textual_inversion = false, bit-equivalent to plain encoding).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapters import ProjectionParams
from .backbone.base import Backbone
from .errors import ConfigError, ShapeError
from .fusion import CombinerParams, HeadParams, InteractionHeadParams
from .inversion import DEFAULT_TEMPLATE, PhiNetwork, PromptTemplate, assemble_prompt, prompt_token_ids
from .nn import sigmoid


@dataclass
class RecordFeatures:
    """Precomputed per-record inputs; everything the frozen encoders decide."""

    record_id: str
    visual_raw: np.ndarray          # V_E(image), length d
    text_raw: np.ndarray            # T_E(raw meme text), length d
    head_ids: list                  # [SOT, prefix...] prompt ids
    tail_ids: list                  # [separator + text..., EOT], tail-truncated
    label: int | None = None
    ti_text_raw: np.ndarray | None = None   # T_E(inversion prompt), adapter-free


class MemeClassifier:
    def __init__(self, backbone: Backbone, phi: PhiNetwork | None = None, *,
                 p: int, h: int | None = None, seed: int = 0,
                 use_combiner: bool = True, use_textual_inversion: bool = True,
                 phi_proj_placement: str = "input", combiner_activation: str = "relu",
                 head_dropout: float = 0.1, interaction_hidden: int = 64,
                 template: PromptTemplate = DEFAULT_TEMPLATE):
        if use_textual_inversion and phi is None:
            raise ConfigError("phi", "textual inversion requires a phi network")
        if phi_proj_placement not in ("input", "output"):
            raise ConfigError("model.phi_proj_placement",
                              f"expected 'input' or 'output', got {phi_proj_placement!r}")
        d, w = backbone.meta.d, backbone.meta.w
        if use_textual_inversion and phi.d != d:
            raise ShapeError(f"phi input dim {phi.d} != backbone d {d}")
        if use_textual_inversion and phi.w != w:
            raise ShapeError(f"phi output dim {phi.w} != token-embedding width {w}")
        self.backbone = backbone
        self.phi = phi if use_textual_inversion else None
        self.template = template
        self.use_combiner = bool(use_combiner)
        self.use_textual_inversion = bool(use_textual_inversion)
        self.phi_proj_placement = phi_proj_placement
        self.p = int(p)
        self.h = self.p if h is None else int(h)
        self.seed = int(seed)

        self.visual_proj = ProjectionParams(d, self.p, "visual_proj", "seeded_uniform", seed)
        self.textual_proj = ProjectionParams(d, self.p, "textual_proj", "seeded_uniform", seed)
        if self.use_textual_inversion:
            side = d if phi_proj_placement == "input" else w
            self.phi_proj = ProjectionParams(side, side, "phi_proj", "identity_padded", seed)
        else:
            self.phi_proj = None
        if self.use_combiner:
            self.combiner = CombinerParams(self.p, self.h, seed=seed, activation=combiner_activation)
            self.head = HeadParams(self.h, dropout=head_dropout, seed=seed)
            self.interaction = None
        else:
            self.combiner = None
            self.head = None
            self.interaction = InteractionHeadParams(self.p, hidden=interaction_hidden, seed=seed)
        self._cache = None

    # -- bookkeeping ------------------------------------------------------

    def components(self) -> dict:
        """Every frozen and trainable component, by stable name."""
        out = {"backbone": self.backbone}
        if self.phi is not None:
            out["phi"] = self.phi
        out["visual_proj"] = self.visual_proj
        out["textual_proj"] = self.textual_proj
        if self.phi_proj is not None:
            out["phi_proj"] = self.phi_proj
        if self.combiner is not None:
            out["combiner"] = self.combiner
            out["head"] = self.head
        if self.interaction is not None:
            out["interaction"] = self.interaction
        return out

    def trainable_components(self) -> dict:
        return {k: v for k, v in self.components().items() if k not in ("backbone", "phi")}

    def component_hashes(self) -> dict:
        return {name: comp.state_hash() for name, comp in self.components().items()}

    def fusion_modules(self):
        if self.use_combiner:
            return [self.combiner, self.head]
        return [self.interaction]

    def zero_grad(self):
        for mod in self.trainable_components().values():
            mod.zero_grad()

    # -- feature preparation ---------------------------------------------

    def prepare_record(self, record, root=None, with_ti_text: bool = False) -> RecordFeatures:
        """Run the frozen encoders once; trainable parts never touch this."""
        from .data import load_image

        image = load_image(record, root=root)
        visual = self.backbone.encode_image(image)
        text_feat = self.backbone.encode_text(record.text)
        head_ids, tail_ids = prompt_token_ids(record.text, self.backbone, self.template)
        feats = RecordFeatures(
            record_id=record.id,
            visual_raw=visual.values,
            text_raw=text_feat.values,
            head_ids=head_ids,
            tail_ids=tail_ids,
            label=record.label,
        )
        if with_ti_text and self.phi is not None:
            from .inversion import invert

            pseudo = invert(visual, self.phi)
            seq = assemble_prompt(pseudo.values, head_ids, tail_ids, self.backbone)
            feats.ti_text_raw = self.backbone.encode_token_embeddings(seq).values
        return feats

    # -- forward / backward ------------------------------------------------

    def forward_features(self, feats: list, train: bool = False, rng=None) -> np.ndarray:
        if not feats:
            raise ShapeError("empty feature batch")
        visual_raw = np.stack([f.visual_raw for f in feats])
        img = self.visual_proj.forward(visual_raw)
        cache = {"n": len(feats)}
        if self.use_textual_inversion:
            text_raw, cache_ti = self._inversion_forward(feats, visual_raw)
            cache.update(cache_ti)
        else:
            text_raw = np.stack([f.text_raw for f in feats])
        txt = self.textual_proj.forward(text_raw)
        if self.use_combiner:
            fused = self.combiner.forward(txt, img)
            logits = self.head.forward(fused, train=train, rng=rng)
        else:
            logits = self.interaction.forward(txt, img)
        self._cache = cache
        return np.asarray(logits, dtype=np.float64)

    def _inversion_forward(self, feats, visual_raw):
        d = self.backbone.meta.d
        n = len(feats)
        cache = {}
        if self.phi_proj_placement == "input":
            z = self.phi_proj.forward(visual_raw)
            phi_caches = []
            pseudo = np.empty((n, self.backbone.meta.w))
            for i in range(n):
                c = {}
                pseudo[i] = self.phi.forward(z[i], cache=c)
                phi_caches.append(c)
            cache["phi_caches"] = phi_caches
        else:
            raw_pseudo = np.stack([self.phi.forward(visual_raw[i]) for i in range(n)])
            pseudo = self.phi_proj.forward(raw_pseudo)
        enc_caches = []
        text_raw = np.empty((n, d))
        slot = len(feats[0].head_ids)
        for i, f in enumerate(feats):
            seq = assemble_prompt(pseudo[i], f.head_ids, f.tail_ids, self.backbone)
            fv, c = self.backbone.encode_token_embeddings_with_cache(seq)
            text_raw[i] = fv.values
            enc_caches.append(c)
        cache.update(enc_caches=enc_caches, slot=slot)
        return text_raw, cache

    def backward_features(self, dlogits: np.ndarray) -> None:
        """Accumulate gradients for the batch of the latest forward."""
        cache = self._cache
        if cache is None:
            raise ShapeError("backward_features before forward_features")
        if self.use_combiner:
            dfused = self.head.backward(dlogits)
            dtxt, dimg = self.combiner.backward(dfused)
        else:
            dtxt, dimg = self.interaction.backward(dlogits)
        dtext_raw = self.textual_proj.backward(dtxt)
        self.visual_proj.backward(dimg)
        if self.use_textual_inversion:
            n = cache["n"]
            slot = cache["slot"]
            dpseudo = np.empty((n, self.backbone.meta.w))
            for i in range(n):
                drows = self.backbone.encode_token_embeddings_backward(
                    cache["enc_caches"][i], dtext_raw[i]
                )
                dpseudo[i] = drows[slot]
            if self.phi_proj_placement == "input":
                dz = np.stack([
                    self.phi.input_backward(dpseudo[i], cache["phi_caches"][i])
                    for i in range(n)
                ])
                self.phi_proj.backward(dz)
            else:
                self.phi_proj.backward(dpseudo)
        self._cache = None

    # -- inference ----------------------------------------------------------

    def predict_proba(self, feats: list, batch_size: int = 256) -> np.ndarray:
        """Deterministic scores, dropout off."""
        scores = np.empty(len(feats), dtype=np.float64)
        for lo in range(0, len(feats), batch_size):
            chunk = feats[lo: lo + batch_size]
            logits = self.forward_features(chunk, train=False)
            scores[lo: lo + len(chunk)] = sigmoid(logits)
        self._cache = None
        return scores

    def score_pair(self, image, text: str):
        """One (image, text) pair -> (logit, probability)."""
        from .data import MemeRecord

        feats = self.prepare_record(MemeRecord(id="query", image_ref=image, text=text, label=None))
        logit = float(self.forward_features([feats], train=False)[0])
        self._cache = None
        return logit, float(sigmoid(np.float64(logit)))
