"""Write a HuggingFace vision tower as a safetensors file VitBackend can load.

    python -m hallucheck.hf_export facebook/dinov2-with-registers-base dino.safetensors
    python -m hallucheck.hf_export openai/clip-vit-base-patch16 clip.safetensors

Needs torch, transformers and safetensors; the core itself does not.
"""

import argparse
import json


def export(model, path):
    """Saves `model` (Dinov2WithRegistersModel, Dinov2Model or CLIPVisionModel)."""
    from safetensors.torch import save_file

    cfg = model.config
    meta = {
        "num_heads": str(cfg.num_attention_heads),
        "layer_norm_eps": repr(cfg.layer_norm_eps),
        "hidden_act": str(cfg.hidden_act),
    }
    if cfg.model_type == "clip_vision_model":
        meta["image_mean"] = json.dumps([0.48145466, 0.4578275, 0.40821073])
        meta["image_std"] = json.dumps([0.26862954, 0.26130258, 0.27577711])
    tensors = {k: v.detach().float().contiguous() for k, v in model.state_dict().items()}
    save_file(tensors, str(path), metadata=meta)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("model", help="hub id or local directory")
    ap.add_argument("out", help="output .safetensors path")
    args = ap.parse_args(argv)

    from transformers import AutoConfig, AutoModel, CLIPVisionModel

    cfg = AutoConfig.from_pretrained(args.model)
    if cfg.model_type == "clip":
        model = CLIPVisionModel.from_pretrained(args.model)
    else:
        model = AutoModel.from_pretrained(args.model)
    export(model.eval(), args.out)


if __name__ == "__main__":
    main()
