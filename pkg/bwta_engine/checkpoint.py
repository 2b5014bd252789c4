"""
Checkpoint directories for the packed inference model.

Layout:
    manifest.cfg     key=value: dims, heads, stage L, every activation scale
    <linear>.bwta    sign-packed binary weight with s_W in the header
    fp_params.npz    full-precision embed/head weights and LayerNorm affine parameters
"""

import os
from typing import Dict

import numpy as np
import structlog

from .errors import CorruptPackError
from .layers import AttentionParams, BlockParams, BwtaLinear, ToyModel
from .loader import CheckpointLoader
from .models import PackKind, QuantMode, QuantState
from .serialization import read_bwta, write_bwta

logger = structlog.get_logger(__name__)

_FP_KEYS = ("embed_w", "embed_b", "head_w", "head_b", "ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta")


def _act_mode(name: str, stage_L: int) -> QuantMode:
    if name in ("ffn2", "att"):
        return QuantMode.bool_()
    return QuantMode.levelwise(stage_L)


def save_checkpoint(model: ToyModel, checkpoint_dir: str) -> None:
    os.makedirs(checkpoint_dir, exist_ok=True)
    block = model.block
    attn = block.attention
    lines = [
        "# BWTA toy-model checkpoint",
        f"format_version={CheckpointLoader.FORMAT_VERSION}",
        f"d_in={model.d_in}",
        f"dim={attn.d_model}",
        f"heads={attn.heads}",
        f"ffn_dim={block.ffn1.out_features}",
        f"n_classes={model.n_classes}",
        f"stage_L={model.stage_L}",
        f"eps={block.eps!r}",
    ]
    for name, layer in block.linears().items():
        write_bwta(os.path.join(checkpoint_dir, f"{name}.bwta"), layer.packed, layer.s_w)
        lines.append(f"scale.{name}={layer.act_state.scale!r}")
        lines.append(f"mu.{name}={layer.mu!r}")
        lines.append(f"sw.{name}={layer.s_w!r}")
    for name, state in (("q", attn.s_q), ("k", attn.s_k), ("v", attn.s_v), ("att", attn.s_att)):
        lines.append(f"scale.{name}={state.scale!r}")

    np.savez(
        os.path.join(checkpoint_dir, "fp_params.npz"),
        embed_w=model.embed_w, embed_b=model.embed_b,
        head_w=model.head_w, head_b=model.head_b,
        ln1_gamma=block.ln1_gamma, ln1_beta=block.ln1_beta,
        ln2_gamma=block.ln2_gamma, ln2_beta=block.ln2_beta,
    )
    # manifest last: a directory without one is not a checkpoint
    with open(os.path.join(checkpoint_dir, CheckpointLoader.MANIFEST), "w", encoding="utf-8") as handle:
        handle.write("\n".join(lines) + "\n")
    logger.info("saved checkpoint", path=checkpoint_dir, stage_L=model.stage_L)


def load_checkpoint(checkpoint_dir: str) -> ToyModel:
    loader = CheckpointLoader(checkpoint_dir)
    manifest = loader.load_manifest()
    stage_L = manifest["stage_L"]

    linears: Dict[str, BwtaLinear] = {}
    for name in CheckpointLoader.LINEARS:
        packed, s_w = read_bwta(loader.weight_path(name))
        if packed.kind is not PackKind.SIGN_NEG_IS_ONE:
            raise CorruptPackError(f"{name}.bwta holds {packed.kind.name}, expected a sign-packed weight")
        state = QuantState(manifest[f"scale.{name}"], _act_mode(name, stage_L))
        # the manifest keeps s_W at full precision; the header copy is float32
        s_w = manifest.get(f"sw.{name}", s_w)
        linears[name] = BwtaLinear.from_packed(packed, s_w, state, mu=manifest.get(f"mu.{name}", 0.0))

    expected = {
        "q_proj": (manifest["dim"], manifest["dim"]),
        "k_proj": (manifest["dim"], manifest["dim"]),
        "v_proj": (manifest["dim"], manifest["dim"]),
        "o_proj": (manifest["dim"], manifest["dim"]),
        "ffn1": (manifest["ffn_dim"], manifest["dim"]),
        "ffn2": (manifest["dim"], manifest["ffn_dim"]),
    }
    for name, shape in expected.items():
        if linears[name].packed.shape != shape:
            raise CorruptPackError(f"{name}.bwta is {linears[name].packed.shape}, manifest implies {shape}")

    with np.load(loader.fp_params_path()) as data:
        missing = [key for key in _FP_KEYS if key not in data]
        if missing:
            raise CorruptPackError(f"fp_params.npz is missing {', '.join(missing)}")
        fp = {key: data[key].astype(np.float32) for key in _FP_KEYS}

    attention = AttentionParams(
        s_q=QuantState(manifest["scale.q"], _act_mode("q", stage_L)),
        s_k=QuantState(manifest["scale.k"], _act_mode("k", stage_L)),
        s_att=QuantState(manifest["scale.att"], _act_mode("att", stage_L)),
        s_v=QuantState(manifest["scale.v"], _act_mode("v", stage_L)),
        heads=manifest["heads"],
        d_model=manifest["dim"],
    )
    block = BlockParams(
        attention=attention,
        ln1_gamma=fp["ln1_gamma"], ln1_beta=fp["ln1_beta"],
        ln2_gamma=fp["ln2_gamma"], ln2_beta=fp["ln2_beta"],
        eps=manifest["eps"],
        **linears,
    )
    model = ToyModel(
        embed_w=fp["embed_w"], embed_b=fp["embed_b"], block=block,
        head_w=fp["head_w"], head_b=fp["head_b"], stage_L=stage_L,
    )
    if model.d_in != manifest["d_in"] or model.n_classes != manifest["n_classes"]:
        raise CorruptPackError("fp_params.npz does not match the manifest dimensions")
    logger.info("loaded checkpoint", path=checkpoint_dir, stage_L=stage_L)
    return model
