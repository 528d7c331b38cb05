"""One test per acceptance criterion; a summary line per criterion is printed at the end."""
import json
import time
from dataclasses import replace

import numpy as np
import pytest

import reference as ref
from pflsim import cli
from pflsim import config as cfgmod
from pflsim import federation as F
from pflsim import numerics as nx
from pflsim.config import Ablation
from pflsim.federation import PromptMessage, ReliabilityVector, aggregate_shared, communicate, reliability
from pflsim.losses import Batch, LossWeights, client_loss
from pflsim.model import (
    AnswerHead,
    Backbone,
    HeadParams,
    ModelConfig,
    PromptSet,
    answer_forward,
    attention_heads,
    clip_scale_profile,
    count_params,
    encode,
)
from pflsim.numerics import Tensor, grad_check


def toy_config(**synth):
    cfg = cfgmod.default_config()
    spec = replace(cfg.data.synth, sizes=(48, 40, 36, 32), **synth)
    return replace(cfg, data=replace(cfg.data, synth=spec),
                   schedule=replace(cfg.schedule, global_epochs=2, local_epochs=1))


# 1 ---------------------------------------------------------------------------


def test_criterion_1_full_loss_gradient(record_property):
    cfg = ModelConfig(blocks=2, prompt_len=4, width=8, heads=2, image_vocab=10, text_vocab=9,
                      image_len=3, question_len=3, head_hidden=6, init_std=0.3, embed_std=1.0, prompt_std=0.5)
    rng = np.random.default_rng(0)
    bb = Backbone.init(cfg, seed=1)
    batch = Batch(
        image_tokens=rng.integers(0, cfg.image_vocab, size=(2, cfg.image_len)),
        question_tokens=np.array([[3, 5, 0], [2, 7, 8]]),
        question_valid=np.array([[True, True, False], [True, True, True]]),
        labels=np.array([1, 2]),
    )
    local = {t: Tensor(PromptSet.random(cfg, t, rng).values, requires_grad=True) for t in ("image", "text")}
    shared = {t: Tensor(PromptSet.random(cfg, t, rng).values) for t in ("image", "text")}
    head = HeadParams.of(AnswerHead.init(cfg, 3, rng), requires_grad=True)
    mask = nx.DropoutMask.sample((2, cfg.head_hidden), cfg.head_dropout, rng)
    weights = LossWeights(0.5, 0.001)

    def f():
        return client_loss(batch, bb, local, shared, head, weights, train=True, dropout_mask=mask).total

    t0 = time.time()
    rep = grad_check(f, {"image_prompt": local["image"], "text_prompt": local["text"], **head.tensors()})
    elapsed = time.time() - t0
    record_property("detail", f"max rel err {rep.max_error:.2e} (< 1e-4), {elapsed:.1f}s (< 60s)")
    assert rep.max_error < 1e-4, rep.errors
    assert elapsed < 60


# 2 ---------------------------------------------------------------------------


def test_criterion_2_vanilla_equivalence(record_property):
    cfg = ModelConfig(blocks=3, prompt_len=0, width=16, heads=4, image_vocab=20, text_vocab=15,
                      image_len=6, question_len=5, head_hidden=12, init_std=0.2, embed_std=1.0)
    bb = Backbone.init(cfg, seed=2)
    rng = np.random.default_rng(3)
    head = AnswerHead.init(cfg, 5, rng)
    empty = {t: PromptSet.zeros(cfg, t, "local") for t in ("image", "text")}
    worst = 0.0
    for _ in range(20):
        img = rng.integers(0, cfg.image_vocab, size=cfg.image_len)
        n_q = int(rng.integers(1, cfg.question_len + 1))
        q = np.zeros(cfg.question_len, dtype=int)
        q[:n_q] = rng.integers(1, cfg.text_vocab, size=n_q)
        valid = q != 0
        fi = encode(img[None], "image", empty["image"], None, bb).data[0]
        ft = encode(q[None], "text", empty["text"], None, bb, valid[None]).data[0]
        logits = answer_forward(Tensor(fi[None]), Tensor(ft[None]), head, train=False).data[0]
        blocks = {t: [ref.block_dict(b) for b in bb.towers[t].blocks] for t in ("image", "text")}
        ri = ref.encoder(img, bb.towers["image"].embedding.data, bb.pos_enc, blocks["image"], cfg.heads, cfg.ln_eps)
        rt = ref.encoder(q, bb.towers["text"].embedding.data, bb.pos_enc, blocks["text"], cfg.heads, cfg.ln_eps,
                         valid)
        hid = ref.gelu(np.concatenate([ri, rt]) @ head.w1 + head.b1)
        rl = hid @ head.w2 + head.b2
        worst = max(worst, np.abs(fi - ri).max(), np.abs(ft - rt).max(), np.abs(logits - rl).max())
    record_property("detail", f"max abs diff {worst:.1e} (< 1e-12) over 20 inputs")
    assert worst < 1e-12


# 3 ---------------------------------------------------------------------------


def test_criterion_3_zero_value_prefix_parallel(record_property):
    cfg = ModelConfig(blocks=1, prompt_len=4, width=16, heads=4, init_std=0.3)
    bb = Backbone.init(cfg, seed=4)
    blk = bb.towers["image"].blocks[0]
    rng = np.random.default_rng(5)
    min_cos, scales = 1.0, []
    from pflsim.model import Prefix

    for _ in range(20):
        h = Tensor(rng.normal(size=(1, 5, cfg.width)))
        keys = [Tensor(rng.normal(size=(2, cfg.width))) for _ in range(2)]
        zero = Tensor(np.zeros((2, cfg.width)))
        out = attention_heads(h, Prefix(keys[0], zero, keys[1], zero), None, blk, cfg.heads).data
        van = attention_heads(h, None, None, blk, cfg.heads).data
        dot = (out * van).sum(-1)
        cos = dot / (np.linalg.norm(out, axis=-1) * np.linalg.norm(van, axis=-1))
        min_cos = min(min_cos, cos.min())
        scales.append(dot / (van * van).sum(-1))
    scales = np.concatenate([s.ravel() for s in scales])
    record_property("detail", f"min cos {min_cos:.15f} (> 1-1e-10), scale in [{scales.min():.3f}, {scales.max():.3f}]")
    assert min_cos > 1 - 1e-10
    assert np.all(scales > 0) and np.all(scales <= 1)


# 4 ---------------------------------------------------------------------------


def test_criterion_4_aggregation_algebra(record_property):
    rng = np.random.default_rng(6)
    shape = (2, 4, 3)
    checks = 0
    for trial in range(40):
        n = 2 + trial % 4
        msgs = [PromptMessage(i, float(rng.uniform()), {t: rng.normal(size=shape) for t in ("image", "text")})
                for i in range(n)]
        for t in range(n):
            eta = reliability(t, msgs)
            assert np.all(eta.weights >= 0) and abs(eta.weights.sum() - 1) <= 1e-12
            got = aggregate_shared(t, msgs, eta)
            for tower in ("image", "text"):
                want = np.zeros(shape)
                for idx in np.ndindex(*shape):
                    want[idx] = sum(w * msgs[p].prompts[tower][idx] for p, w in zip(eta.peers, eta.weights))
                np.testing.assert_allclose(got[tower].values, want, rtol=0, atol=1e-14)
            checks += 1
        # fixed point
        common = {t: rng.normal(size=shape) for t in ("image", "text")}
        same = [PromptMessage(i, float(rng.uniform(0.1, 1)), common) for i in range(n)]
        res = communicate(same)
        for t in range(n):
            for tower in ("image", "text"):
                np.testing.assert_allclose(res.shared[t][tower].values, common[tower], rtol=0, atol=1e-14)
        # uniform fallback: every peer anti-aligned with the target
        own = rng.normal(size=shape)
        anti = [PromptMessage(0, 0.5, {"image": own})] + [
            PromptMessage(i, float(rng.uniform()), {"image": -own * rng.uniform(0.5, 2)}) for i in range(1, n)]
        eta = reliability(0, anti)
        assert eta.degenerate and np.allclose(eta.weights, 1 / (n - 1)) and abs(eta.weights.sum() - 1) <= 1e-12
    record_property("detail", f"{checks} target/round cases, T in 2..5: simplex, oracle, fixed point, fallback")


# 5 ---------------------------------------------------------------------------


BENCH_SEEDS = (0, 1, 2)


def test_criterion_5_communication_benefit(record_property):
    cfg = cfgmod.default_config()
    spec = cfg.data.synth
    assert tuple(spec.sizes) == (734, 829, 461, 335) and spec.overlap == 0.5
    assert cfg.model.width == 64 and cfg.model.blocks == 4
    t0 = time.time()
    means = {}
    for mode in ("pm", "as2"):
        accs = []
        for seed in BENCH_SEEDS:
            run_cfg = replace(cfg, seed=seed, ablation=Ablation.from_mode(mode))
            res = F.run(run_cfg, F.prepare_datasets(run_cfg))
            accs.append(np.mean(list(res.history.final_test_acc().values())))
        means[mode] = float(np.mean(accs))
    elapsed = time.time() - t0
    margin = 100 * (means["pm"] - means["as2"])
    record_property("detail", f"PM {means['pm']:.4f} vs AS2 {means['as2']:.4f}: margin {margin:+.2f} pts (>= 1), "
                              f"{elapsed / 60:.1f} min (< 15)")
    assert margin >= 1.0
    assert elapsed < 15 * 60


# 6 ---------------------------------------------------------------------------


def test_criterion_6_payload(record_property):
    acct = count_params(clip_scale_profile(), prompted_towers=2)
    assert 1e-4 <= acct.payload_ratio <= 1e-3
    cfg = toy_config()
    res = F.run(cfg, F.prepare_datasets(cfg))
    m, T = cfg.model, cfg.n_clients
    expected = T * (2 * m.blocks * m.prompt_len * m.width * 8 + 8)
    per_round = {r.payload_bytes for r in res.history.rounds}
    record_property("detail", f"CLIP-scale ratio {100 * acct.payload_ratio:.4f}% (in [0.01%, 0.1%]); "
                              f"toy bytes/round {sorted(per_round)} == {expected}")
    assert per_round == {expected}


# 7 ---------------------------------------------------------------------------


def test_criterion_7_frozen_backbone_and_privacy(record_property):
    cfg = toy_config()
    cfg = replace(cfg, schedule=replace(cfg.schedule, global_epochs=3))
    bb = Backbone.init(cfg.model, cfg.seed)
    before = bb.content_hash()
    wire = []
    F.run(cfg, F.prepare_datasets(cfg), backbone=bb, on_message=wire.append)
    assert bb.content_hash() == before
    m = cfg.model
    prompt_bytes = m.blocks * m.prompt_len * m.width * 8
    for raw in wire:
        header_line, body = raw.split(b"\n", 1)
        header = json.loads(header_line)
        assert set(header) == {"client", "acc", "prompts"}
        assert isinstance(header["acc"], float) and 0 <= header["acc"] <= 1
        assert header["prompts"] == {t: [m.blocks, m.prompt_len, m.width] for t in ("image", "text")}
        assert len(body) == 2 * prompt_bytes
    record_property("detail", f"backbone sha256 unchanged; {len(wire)} messages hold only prompts + acc")
    assert len(wire) == cfg.n_clients * (cfg.schedule.global_epochs - 1)


# 8 ---------------------------------------------------------------------------


def test_criterion_8_thread_determinism(tmp_path, record_property):
    cfg = toy_config()
    cfg_path = tmp_path / "run.ini"
    cfg_path.write_text(cfgmod.to_text(cfg))
    outs = []
    for threads in (1, 4):
        out = tmp_path / f"t{threads}"
        assert cli.main(["train", "--config", str(cfg_path), "--out", str(out), "--threads", str(threads)]) == 0
        outs.append((out / "history.csv").read_bytes())
    record_property("detail", f"history CSVs {'identical' if outs[0] == outs[1] else 'differ'} "
                              f"({len(outs[0])} bytes) with --threads 1 and 4")
    assert outs[0] == outs[1]


# 9 ---------------------------------------------------------------------------


def test_criterion_9_ablation_plumbing(record_property):
    base = toy_config()
    notes = []
    for mode, frozen, trained in (("as3", "image", "text"), ("as4", "text", "image")):
        cfg = replace(base, ablation=Ablation.from_mode(mode))
        ds = F.prepare_datasets(cfg)
        clients = F.init_clients(cfg, ds)
        init = [{t: c.local[t].values.copy() for t in ("image", "text")} for c in clients]
        F.run(cfg, ds, clients=clients)
        for c, i in zip(clients, init):
            assert c.local[frozen].values.tobytes() == i[frozen].tobytes()
            assert c.local[trained].values.tobytes() != i[trained].tobytes()
        notes.append(f"{mode}: {frozen} prompts bitwise at init")
    cfg = replace(base, ablation=Ablation.from_mode("as1"))
    ds = F.prepare_datasets(cfg)
    clients = F.init_clients(cfg, ds)
    init = [(c.local["image"].values.copy(), c.local["text"].values.copy(), c.head.w1.copy()) for c in clients]
    res = F.run(cfg, ds, clients=clients)
    assert len(res.history.epochs) == cfg.schedule.global_epochs * cfg.n_clients and not res.history.rounds
    for c, (img, txt, w1) in zip(clients, init):
        assert c.local["image"].values.tobytes() == img.tobytes()
        assert c.local["text"].values.tobytes() == txt.tobytes()
        assert not np.array_equal(c.head.w1, w1)
    notes.append("as1: heads only, completed")
    record_property("detail", "; ".join(notes))
