"""Run the two-stage schedule and audit which components each stage may touch.

Stage 1 trains visual_proj against a throwaway raw-text scaffold. Stage 2
reloads the stage-1 checkpoint, freezes visual_proj, and trains textual_proj,
phi_proj, the Combiner, and the classification head. The backbone and phi
stay frozen throughout; component hashes prove it.
"""

import tempfile
from pathlib import Path

from memefusion.config import default_config, resolve_config
from memefusion.training import build_model, train_all

cfg = default_config()
cfg["data"].update(n_synthetic=64)
cfg["train"].update(stage1_epochs=2, stage2_epochs=2)
cfg = resolve_config(cfg)

out = Path(tempfile.mkdtemp(prefix="memefusion-demo3-"))
initial = build_model(cfg).component_hashes()

r1 = train_all(cfg, out, stage="1")
mid = r1["model"].component_hashes()
r2 = train_all(cfg, out, stage="2")
final = r2["model"].component_hashes()

print(f"run dir: {out}")
print(f"stage1 checkpoint: {r1['stage1'].name}, final: {r2['final'].name}")

print(f"\n{'component':<14} {'stage 1':<10} {'stage 2':<10}")
for name in sorted(initial):
    s1 = "trained" if mid[name] != initial[name] else "frozen"
    s2 = "trained" if final[name] != mid[name] else "frozen"
    print(f"{name:<14} {s1:<10} {s2:<10}")

# the metric history the stage-2 run keeps of itself (stage-1 history lives
# in the stage1 checkpoint manifest); the last entry records epoch selection
print(f"\nstage-2 history ({len(r2['history'])} entries):")
for h in r2["history"]:
    if "epoch" in h:
        line = f"  stage {h['stage']} epoch {h['epoch']}: train_loss={h['train_loss']:.4f}"
        if "selection_auroc" in h:
            line += f" selection_auroc={h['selection_auroc']:.4f}"
    else:
        line = (f"  restored epoch {h['selected_epoch']} "
                f"(holdout auroc {h['selection_auroc']:.4f})")
    print(line)
