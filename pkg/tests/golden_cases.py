"""Deterministic computations whose outputs are pinned by files in tests/golden."""

import json
import tempfile
from contextlib import redirect_stdout
from io import StringIO
from pathlib import Path

import numpy as np

from spirl.agent.aggregator import AggregatorConfig
from spirl.cli import main as cli_main
from spirl.agent.network import PolicyNetwork, act
from spirl.images import attention_overlay, encode_ppm, heatmap, selection_overlay, to_uint8
from spirl.mae import MAE, FrameSpec, MAEConfig, denormalize, random_mask, unpatchify
from spirl.transformer import AttentionWeights, TransformerLayerParams, mhsa, sdpa, transformer_layer

SMALL_MAE = MAEConfig(frame=FrameSpec(24, 24, 3, 8), enc_dim=16, enc_depth=1, enc_heads=2, dec_dim=32, dec_depth=1, dec_heads=4)


def small_mae(seed=0):
    return MAE(SMALL_MAE, seed=seed, dtype=np.float64)


def toy_frame(seed=0, size=24):
    return np.random.default_rng(seed).uniform(0, 1, size=(size, size, 3))


def sdpa_case():
    w = AttentionWeights.init(8, 2, np.random.default_rng(11), dtype=np.float64)
    X = np.random.default_rng(12).normal(size=(5, 8))
    return sdpa(X[0], X, w).data


def mhsa_case():
    w = AttentionWeights.init(32, 8, np.random.default_rng(21), dtype=np.float64)
    X = np.random.default_rng(22).normal(size=(6, 32))
    return mhsa(X[0], X, w).data


def layer_case():
    p = TransformerLayerParams.init(8, 2, 4, np.random.default_rng(31), dtype=np.float64)
    X = np.random.default_rng(32).normal(size=(3, 8))
    return transformer_layer(X, p).data


def mask_case():
    vis, masked = random_mask(16, 0.75, np.random.default_rng(7))
    return np.concatenate([vis, masked])


def mae_all_visible_case():
    mae = small_mae()
    return mae.forward(toy_frame(), np.arange(9)[None]).data[0]


def surroundings_case():
    return small_mae().reconstruct_from_surroundings(toy_frame(), (1, 2))


def probe_case(mode):
    mae = MAE(MAEConfig.toy(), seed=3)
    pred = mae.decoder_probe(mode)
    pix = denormalize(pred, np.array([0.3, 0.4, 0.5]), np.array([0.2, 0.2, 0.2]))
    return encode_ppm(to_uint8(unpatchify(pix, 8)))


def q_values_case():
    net = PolicyNetwork(AggregatorConfig(grid=6), n_actions=5, seed=4)
    rng = np.random.default_rng(5)
    emb = rng.normal(size=(4, 11, 64)).astype(np.float32)
    pos = np.array([rng.permutation(36)[:11] for _ in range(4)])
    pos[:, 8:] = -1
    return net.q_numpy(emb, pos).astype(np.float64)


def act_case():
    rng = np.random.default_rng(9)
    q = np.array([0.1, 0.5, 0.2, 0.5, -1.0])
    return np.array([act(q, 0.3, rng) for _ in range(40)])


def _errors():
    return np.random.default_rng(13).gamma(1.0, size=(6, 6))


def heatmap_case():
    return encode_ppm(heatmap(_errors(), 8))


def selection_case():
    frame = np.random.default_rng(14).integers(0, 256, size=(48, 48, 3), dtype=np.uint8)
    return encode_ppm(selection_overlay(frame, [0, 7, 35], 8))


def attention_case():
    frame = np.random.default_rng(15).integers(0, 256, size=(48, 48, 3), dtype=np.uint8)
    return encode_ppm(attention_overlay(frame, [1, 2, 20], [2, 20, 33], 8))


# a miniature end-to-end run: 48x48 desk frames, a one-block MAE, a few hundred agent steps
TINY_RUN = {
    "mae": {"frame": {"h": 48, "w": 48, "c": 3, "p": 8}, "enc_dim": 16, "enc_depth": 1, "enc_heads": 2,
            "dec_dim": 32, "dec_depth": 1, "dec_heads": 4},
    "schedule": {"epochs": 3, "warmup_epochs": 1, "batch_size": 16},
    "agent": {"total_steps": 300, "buffer_capacity": 300, "learning_starts": 100, "batch_size": 8,
              "n_step": 3, "target_sync": 50, "checkpoint_interval": 150, "beta_steps": 300},
}


def run_cli(*argv):
    buf = StringIO()
    with redirect_stdout(buf):
        code = cli_main([str(a) for a in argv])
    return code, buf.getvalue()


def tiny_pipeline(root):
    """collect -> pretrain -> saliency -> train -> attn-viz under ``root``; returns stdout per step."""
    root = Path(root)
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY_RUN))
    steps = {
        "collect": ("collect", "--config", cfg, "--frames", 64, "--seed", 3, "--out", root / "frames.spfr"),
        "pretrain": ("pretrain", "--config", cfg, "--data", root / "frames.spfr", "--out", root / "mae"),
        "saliency": ("saliency", "--config", cfg, "--ckpt", root / "mae", "--data", root / "frames.spfr",
                     "--frame", 5, "--out", root / "saliency"),
        "train": ("train", "--config", cfg, "--ckpt", root / "mae", "--out", root / "agent"),
        "attn-viz": ("attn-viz", "--config", cfg, "--checkpoint", root / "agent" / "agent_final.spnt",
                     "--data", root / "frames.spfr", "--frame", 5, "--out", root / "attn"),
    }
    stdout = {}
    for name, argv in steps.items():
        code, text = run_cli(*argv)
        if code != 0:
            raise RuntimeError(f"{name} exited {code}")
        stdout[name] = text
    return stdout


_tiny_cache = {}


def _tiny_output(rel):
    if "root" not in _tiny_cache:
        _tiny_cache["tmp"] = tempfile.TemporaryDirectory()
        tiny_pipeline(_tiny_cache["tmp"].name)
        _tiny_cache["root"] = Path(_tiny_cache["tmp"].name)
    return (_tiny_cache["root"] / rel).read_bytes()


CLI_GOLDEN = {
    "cli_heatmap.ppm": "saliency/heatmap.ppm",
    "cli_selection.ppm": "saliency/selection.ppm",
    "cli_probe_pe_plus_mask.ppm": "saliency/probe_pe_plus_mask.ppm",
    "cli_surroundings.ppm": "saliency/surroundings.ppm",
    "cli_attention.ppm": "attn/attention.ppm",
}

CASES = {
    "sdpa.npy": sdpa_case,
    "mhsa_k8_d32.npy": mhsa_case,
    "layer_3x8.npy": layer_case,
    "mask_seed7.npy": mask_case,
    "mae_all_visible.npy": mae_all_visible_case,
    "surroundings_1_2.npy": surroundings_case,
    "q_values.npy": q_values_case,
    "act_sequence.npy": act_case,
    "heatmap.ppm": heatmap_case,
    "selection.ppm": selection_case,
    "attention.ppm": attention_case,
    **{f"probe_untrained_{m}.ppm": (lambda m=m: probe_case(m)) for m in ("pe_plus_mask", "pe_only", "mask_only")},
}

CASES.update({name: (lambda rel=rel: _tiny_output(rel)) for name, rel in CLI_GOLDEN.items()})
