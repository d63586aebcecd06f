from dataclasses import replace

import numpy as np
import pytest

from omnilab import decoder as dec
from omnilab import toybench
from omnilab.numcore import AdamWState, Graph, NonFiniteError, mse, seeded_stream
from omnilab.rope import SchemeConfig

SMALL = dec.ModelConfig(dim=16, heads=2, layers=2)


def _params(cfg=SMALL, seed=0):
    return dec.init_params(cfg, seeded_stream(seed))


def _perturbed(cfg=SMALL, seed=0, scale=0.2, dtype=np.float64):
    """Initial parameters plus noise everywhere, so no gate or branch is zero."""
    r = np.random.default_rng(seed + 99)
    return {k: (v + scale * r.normal(size=v.shape)).astype(dtype) for k, v in _params(cfg, seed).items()}


def _images(b=1, n=2, size=8, seed=0, c=3):
    return np.random.default_rng(seed).uniform(size=(b, n, size, size, c)).astype(np.float32)


def _predict(params, cfg, images, ks, dtype=np.float32, t=None, target=None, refine=True):
    with Graph(dtype=dtype) as g:
        P = {k: g.constant(v) for k, v in params.items()}
        cond = dec.condition_embeddings(P, ks)
        tgt = images.shape[2:4] if target is None else target
        seq = dec.assemble_sequence(P, cond, images, tgt, cfg)
        return dec.forward(P, seq, cfg, t=t, refine=refine).data


def test_token_count_default_config():
    cfg = dec.ModelConfig()
    with Graph() as g:
        P = dec.bind(g, _params(cfg))
        seq = dec.assemble_sequence(P, dec.condition_embeddings(P, [1]), _images(n=3, size=16), (16, 16), cfg)
    assert seq.n_tokens == 4 + 3 * 64 + 64 == 260
    assert seq.embeddings.shape == (1, 260, 128)


def test_distinct_instance_ids_under_omni():
    with Graph() as g:
        P = dec.bind(g, _params())
        seq = dec.assemble_sequence(P, dec.condition_embeddings(P, [1]), _images(n=3), (8, 8), SMALL)
    inst = {int(seq.positions[a, 0]) for seg, (a, b) in zip(seq.layout, seq.ranges) if seg.kind == "image"}
    text = set(seq.positions[: seq.ranges[0][1], 0].tolist())
    assert len(inst) == 4 and not inst & text


def test_sequence_is_bit_identical():
    def build():
        with Graph() as g:
            P = dec.bind(g, _params(seed=3))
            seq = dec.assemble_sequence(P, dec.condition_embeddings(P, [2]), _images(n=2, seed=3), (8, 8), SMALL)
        return seq.embeddings.data.tobytes(), seq.positions.tobytes()

    assert build() == build()


def test_prediction_shape_and_determinism():
    cfg = replace(SMALL, dim=32)
    params = _params(cfg)
    imgs = _images(b=2, n=3, size=16)
    a = _predict(params, cfg, imgs, [1, 3])
    assert a.shape == (2, 64, 12)
    assert np.array_equal(a, _predict(params, cfg, imgs, [1, 3]))


def test_patchify_roundtrip():
    x = _images(b=2, n=3, size=8)
    assert np.array_equal(dec.unpatchify(dec.patchify(x, 2), 8, 8, 2), x)
    # patch (0, 1) holds pixels rows 0-1, cols 2-3
    np.testing.assert_array_equal(dec.patchify(x, 2)[0, 0, 1], x[0, 0, 0:2, 2:4].reshape(-1))


@pytest.mark.parametrize("bad", ["patch", "channels", "too_many"])
def test_assemble_errors(bad):
    imgs = {"patch": _images(size=7), "channels": _images(c=1), "too_many": _images(n=5)}[bad]
    with Graph() as g:
        P = dec.bind(g, _params())
        with pytest.raises(dec.SequenceError):
            dec.assemble_sequence(P, dec.condition_embeddings(P, [1]), imgs, imgs.shape[2:4], SMALL)


def test_config_invariants():
    with pytest.raises(ValueError):
        dec.ModelConfig(dim=30, heads=4)
    with pytest.raises(ValueError):
        dec.ModelConfig(refiner_layers=3)


def test_refiner_identity_at_init():
    with Graph() as g:
        P = dec.bind(g, _params())
        seq = dec.assemble_sequence(P, dec.condition_embeddings(P, [1]), _images(), (8, 8), SMALL)
        out = dec.refine_conditions(P, seq, SMALL)
    assert out.embeddings.shape == seq.embeddings.shape
    assert np.array_equal(out.embeddings.data, seq.embeddings.data)


def test_initial_prediction_is_head_bias():
    params = _params()
    params["out.placeholder"][:] = 0
    params["head.b"][:] = np.arange(12, dtype=np.float32) / 10
    pred = _predict(params, SMALL, _images(b=2), [1, 2])
    assert np.array_equal(pred, np.broadcast_to(params["head.b"], pred.shape))


def test_single_block_stack():
    names = [n for n, _, _ in dec.param_specs(dec.ModelConfig())]
    assert sorted({n.split(".")[1] for n in names if n.startswith("block.")}) == ["0", "1", "2", "3"]
    assert sorted({n.split(".")[1] for n in names if n.startswith("refiner.")}) == ["0", "1"]
    assert len(names) == len(set(names))


def test_variable_condition_length():
    params = _perturbed(seed=1, dtype=np.float32)
    imgs = _images()
    for length in (1, 4, 9):
        with Graph() as g:
            P = {k: g.constant(v) for k, v in params.items()}
            cond = g.constant(np.random.default_rng(length).normal(size=(1, length, 16)))
            seq = dec.assemble_sequence(P, cond, imgs, (8, 8), SMALL)
            assert dec.forward(P, seq, SMALL).shape == (1, 16, 12)


def full_model_gradcheck(mode: str, scheme: str, instances: int = 20) -> float:
    """Worst relative error of a random directional derivative against central
    differences (float64, step 1e-5) on a 2-layer dim-16 model with all
    parameters perturbed away from their zero initialisation."""
    cfg = replace(SMALL, mode=mode, rope=SchemeConfig(scheme, use_image_index_embedding=scheme == "omni_rope"))
    worst = 0.0
    for inst in range(instances):
        params = _perturbed(cfg, seed=inst)
        r = np.random.default_rng(inst)
        imgs = _images(b=2, n=2, size=4, seed=inst).astype(np.float64)
        ks = r.integers(1, 3, size=2)
        target = r.normal(size=(2, 4, 4, 3)) if mode == "flow" else (4, 4)
        t = r.uniform(size=2) if mode == "flow" else None
        goal = r.normal(size=(2, 4, 12))

        def loss_of(p, record=False):
            with Graph(dtype=np.float64) as g:
                P = dec.bind(g, p) if record else {k: g.constant(v) for k, v in p.items()}
                seq = dec.assemble_sequence(P, dec.condition_embeddings(P, ks), imgs, target, cfg)
                loss = mse(dec.forward(P, seq, cfg, t=t), goal)
                if record:
                    g.backward(loss)
                    return {k: P[k].grad for k in P}
            return float(loss.data)

        grads = loss_of(params, record=True)
        u = {k: r.normal(size=v.shape) for k, v in params.items()}
        analytic = sum(float((grads[k] * u[k]).sum()) for k in params)
        h = 1e-5
        plus = loss_of({k: params[k] + h * u[k] for k in params})
        minus = loss_of({k: params[k] - h * u[k] for k in params})
        numeric = (plus - minus) / (2 * h)
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric)))
    return worst


@pytest.mark.parametrize("mode", ["direct", "flow"])
@pytest.mark.parametrize("scheme", ["omni_rope", "qwen_accum", "lumina_accum"])
def test_full_model_directional_gradcheck(mode, scheme):
    assert full_model_gradcheck(mode, scheme) < 1e-3


def test_refiner_receives_gradients():
    cfg = replace(SMALL, layers=1)
    ecfg = toybench.ExperimentConfig(model=cfg, image_size=8, batch_size=4)
    params = _params(cfg)
    state = AdamWState.for_params(params, lr=1e-2)
    data = seeded_stream(0)
    for _ in range(3):
        toybench.train_step(params, state, toybench.make_batch(ecfg, data), cfg)
    with Graph() as g:
        P = dec.bind(g, params)
        g.backward(toybench.batch_loss(P, toybench.make_batch(ecfg, data), cfg))
    refiner = [k for k in P if k.startswith("refiner.")]
    assert refiner and all(np.any(P[k].grad != 0) for k in refiner)


def test_nonfinite_names_layer():
    params = _params()
    params["block.1.attn.qkv.w"][:] = 1e30  # q.k overflows float32 inside block.1
    with pytest.raises(NonFiniteError) as exc, np.errstate(over="ignore"):
        _predict(params, SMALL, _images(), [1])
    assert exc.value.node.startswith("block.1/")


def test_mode_time_contract():
    with pytest.raises(ValueError):
        _predict(_params(), SMALL, _images(), [1], t=np.array([0.5]))
    fcfg = replace(SMALL, mode="flow")
    with pytest.raises(ValueError):
        _predict(_params(fcfg), fcfg, _images(), [1], target=_images()[:, 0])


@pytest.mark.parametrize("cfg", [SMALL, replace(SMALL, mode="flow", rope=SchemeConfig("qwen_accum", True))])
def test_checkpoint_roundtrip(tmp_path, cfg):
    params = _perturbed(cfg, dtype=np.float32)
    path = tmp_path / "m.bin"
    dec.save_checkpoint(path, cfg, params)
    cfg2, params2 = dec.load_checkpoint(path)
    assert cfg2 == cfg
    assert list(params2) == [n for n, _, _ in dec.param_specs(cfg)]
    for k in params:
        assert params2[k].tobytes() == params[k].tobytes()
    raw = path.read_bytes()
    assert raw[:8] == b"OMNICKPT"


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"NOTACKPT" + bytes(16))
    with pytest.raises(ValueError):
        dec.load_checkpoint(p)


def test_index_table_does_not_shift_other_params():
    a = _params(SMALL)
    b = _params(dec.with_scheme(SMALL, "omni_rope", True))
    assert set(b) - set(a) == {"index_emb"}
    assert all(np.array_equal(a[k], b[k]) for k in a)
