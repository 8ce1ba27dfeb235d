import numpy as np
import pytest

from tensorhsi import hsi_data, metrics, trn
from tensorhsi.gradcheck import tiny_trn_config
from tensorhsi.hyperparams import Hyperparams
from tensorhsi.nn import Var
from tensorhsi.sdtn import DivergenceError, GradLowRankPair, SdtnState, sdtn_loss
from tensorhsi.tensor_core import FactorSet, contract_factors, diff_operator, unfold

from oracles import loop_attention, loop_conv


def randomize(model, rng, scale=0.3):
    for v in model.params().values():
        v.value = scale * rng.standard_normal(v.shape)
    return model


def oracle_logits(model, H):
    """Composes the loop oracles for one feature tensor ``H [P, P, B]``."""
    cfg = model.cfg
    p, b = cfg.patch_size, cfg.bands
    bands_first = H.transpose(2, 0, 1)
    f3 = loop_conv(bands_first[None], model.conv3d.W.value, model.conv3d.b.value)
    f2 = loop_conv(bands_first, model.conv2d.W.value, model.conv2d.b.value)
    fused = np.concatenate([f3.reshape(-1, p, p), f2])
    dw = model.dws.depthwise.value
    depth = np.concatenate([loop_conv(fused[c:c + 1], dw[c:c + 1], None)
                            for c in range(fused.shape[0])])
    point = loop_conv(depth, model.dws.pointwise.value, None)
    att = model.attention
    gated = loop_attention(point, att.W1.value, att.b1.value, att.W2.value, att.b2.value)
    logits = model.classifier.W.value @ gated.ravel() + model.classifier.b.value
    return logits, fused


def log_softmax(z):
    z = z - z.max()
    return z - np.log(np.exp(z).sum())


def tiny_batch(cfg, n=3, seed=0):
    rng = np.random.default_rng(seed)
    patches = rng.uniform(0, 1, (n,) + cfg.patch_shape)
    labels = (np.arange(n) % cfg.n_classes) + 1
    return trn.TrnBatch(patches, labels)


def random_tensors(cfg, n, seed):
    batch = tiny_batch(cfg, n, seed)
    return trn.init_tensors(cfg, batch.patches, seed)


def small_config(mode="TRN", **hp):
    base = dict(lr0=1e-3, max_iters=150, step_mode="backtracking")
    base.update(hp)
    return trn.TrnConfig(patch_size=3, bands=6, n_classes=3, mode=mode, conv3d_kernel=(3, 3, 3),
                         conv3d_filters=2, conv2d_filters=4, pointwise_out=8, reduction=2,
                         fctn_rank=2, glr_rank=1, prefit_iters=10, infer_iters=10,
                         hp=Hyperparams(**base))


@pytest.fixture(scope="module")
def scene():
    return hsi_data.synthetic_scene(12, 12, 6, 3, noise=0.01, seed=0)


@pytest.fixture(scope="module")
def split(scene):
    return hsi_data.make_split(scene, 5, 0)


def batch_for(scene, split, cfg):
    return trn.TrnBatch(hsi_data.extract_patches(scene, split.train, cfg.patch_size),
                        split.train_labels)


@pytest.fixture(scope="module")
def trained_trn(scene, split):
    return trn.train(batch_for(scene, split, small_config()), small_config())


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(patch_size=4), dict(n_classes=1), dict(mode="RNN"),
                                    dict(conv3d_kernel=(3, 3)), dict(glr_rank=-1)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            trn.TrnConfig(**kw)

    def test_effective_hp_by_mode(self):
        hp = Hyperparams(alpha=0.5, gamma=0.2)
        cnn = trn.TrnConfig(mode="CNN-baseline", hp=hp).effective_hp
        assert (cnn.alpha, cnn.lambda1, cnn.lambda2, cnn.lambda3, cnn.gamma) == (0, 0, 0, 0, 0)
        assert cnn.beta == hp.beta
        assert trn.TrnConfig(mode="SDTN-only", hp=hp).effective_hp.gamma == 0
        assert trn.TrnConfig(hp=hp).effective_hp == hp

    def test_dict_round_trip(self):
        cfg = small_config("SDTN-only")
        assert trn.TrnConfig.from_dict(cfg.to_dict()) == cfg

    def test_batch_validation(self):
        with pytest.raises(ValueError):
            trn.TrnBatch(np.zeros((2, 3, 3, 4)), [1])
        with pytest.raises(ValueError):
            trn.TrnBatch(np.zeros((2, 3, 3, 4)), [0, 1])


class TestForward:
    def test_zero_classifier_is_uniform(self):
        cfg = tiny_trn_config()
        model = trn.TrnModel(cfg)
        probs = model.forward(np.random.default_rng(0).standard_normal(cfg.patch_shape))
        np.testing.assert_array_equal(probs, np.full(2, 0.5))

    @pytest.mark.parametrize("mode", trn.MODES)
    def test_probabilities_sum_to_one(self, mode):
        cfg = tiny_trn_config(mode)
        rng = np.random.default_rng(1)
        model = randomize(trn.TrnModel(cfg), rng, 1.0)
        probs = model.forward(rng.standard_normal((6,) + cfg.patch_shape))
        assert probs.shape == (6, 2)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    def test_matches_composed_oracles(self):
        cfg = tiny_trn_config()
        rng = np.random.default_rng(2)
        model = randomize(trn.TrnModel(cfg), rng)
        H = rng.standard_normal((2,) + cfg.patch_shape)
        logits, fused = model.logits(Var(H))
        for i in range(2):
            ref, ref_fused = oracle_logits(model, H[i])
            np.testing.assert_allclose(logits.value[i], ref, rtol=1e-10, atol=1e-12)
            np.testing.assert_allclose(fused.value[i], ref_fused, rtol=1e-10, atol=1e-12)

    def test_shape_mismatch(self):
        model = trn.TrnModel(tiny_trn_config())
        with pytest.raises(ValueError, match="features"):
            model.forward(np.zeros((3, 3, 4)))

    def test_layers_by_mode(self):
        names = lambda m: {k.split(".")[0] for k in trn.TrnModel(tiny_trn_config(m)).params()}
        assert names("TRN") == {"conv3d", "conv2d", "dws", "attention", "classifier", "proj"}
        assert names("CNN-baseline") == names("TRN") - {"proj"}
        assert names("SDTN-only") == {"head"}

    def test_load_rejects_mismatch(self):
        model = trn.TrnModel(tiny_trn_config())
        state = model.state_dict()
        state.pop("proj.W")
        with pytest.raises(ValueError, match="proj.W"):
            model.load(state)


class TestLoss:
    def test_reduces_to_summed_sdtn_loss(self):
        cfg = tiny_trn_config()
        hp = cfg.hp.replace(beta=0.0, gamma=0.0)
        model = randomize(trn.TrnModel(cfg), np.random.default_rng(3))
        tensors = random_tensors(cfg, 3, 4)
        batch = tiny_batch(cfg, 3, 5)
        expected = 0.0
        for i in range(3):
            one = tensors.take(i)
            glr = tuple(None if u is None else GradLowRankPair(k, u, v)
                        for k, (u, v) in enumerate(zip(one.U, one.V)))
            state = SdtnState(FactorSet(cfg.ranks, one.G), glr)
            expected += sdtn_loss(state, batch.patches[i], hp=hp)
        assert trn.trn_loss(model, tensors, batch, hp) == pytest.approx(expected, rel=1e-12)

    def test_term_by_term(self):
        cfg = tiny_trn_config()
        hp = cfg.hp
        model = randomize(trn.TrnModel(cfg), np.random.default_rng(6))
        tensors = random_tensors(cfg, 2, 7)
        batch = tiny_batch(cfg, 2, 8)
        tvars = {k: Var(v) for k, v in tensors.named().items()}
        total, terms, _ = trn.joint_objective(model, tvars, batch.patches, batch.labels, hp)
        H = contract_factors(tensors.G, batch=True)
        ref = dict.fromkeys(trn.TERMS, 0.0)
        for i in range(2):
            ref["recon"] += 0.5 * np.sum((batch.patches[i] - H[i]) ** 2)
            for k in range(3):
                g = tensors.G[k][i]
                ref["reg"] += hp.lambda3 * np.sum(g ** 2)
                if tensors.U[k] is None:
                    continue
                u, v = tensors.U[k][i], tensors.V[k][i]
                gap = diff_operator(g.shape[k]) @ unfold(g, k) - u @ v
                ref["lowrank"] += 0.5 * hp.alpha * np.sum(gap ** 2)
                ref["reg"] += hp.lambda1 * np.sum(u ** 2) + hp.lambda2 * np.sum(v ** 2)
            logits, fused = oracle_logits(model, H[i])
            ref["cls"] -= hp.beta * log_softmax(logits)[batch.labels[i] - 1] / 2
            proj = loop_conv(fused, model.proj.W.value, model.proj.b.value).transpose(1, 2, 0)
            ref["cons"] += hp.gamma * np.sum((H[i] - proj) ** 2)
        for k in trn.TERMS:
            assert terms[k] == pytest.approx(ref[k], rel=1e-10), k
        assert float(total.value) == pytest.approx(sum(ref.values()), rel=1e-10)

    def test_only_beta_with_perfect_predictions(self):
        cfg = trn.TrnConfig(patch_size=3, bands=3, n_classes=3, mode="SDTN-only",
                            hp=Hyperparams(alpha=0, lambda1=0, lambda2=0, lambda3=0, gamma=0))
        model = trn.TrnModel(cfg)
        model.head.W.value = 100.0 * np.eye(3)
        patches = np.stack([np.broadcast_to(np.eye(3)[c], (3, 3, 3)) for c in range(3)])
        loss = trn.trn_loss(model, None, trn.TrnBatch(patches, [1, 2, 3]))
        assert 0.0 <= loss < 1e-30

    def test_zero_gamma_decouples_consistency(self):
        cfg = tiny_trn_config()
        tensors = random_tensors(cfg, 2, 9)
        batch = tiny_batch(cfg, 2, 10)

        def factor_grads(hp, proj_seed):
            model = randomize(trn.TrnModel(cfg), np.random.default_rng(11))
            model.proj.W.value = np.random.default_rng(proj_seed).standard_normal(model.proj.W.shape)
            tvars = {k: Var(v) for k, v in tensors.named().items()}
            total, _, _ = trn.joint_objective(model, tvars, batch.patches, batch.labels, hp)
            total.backward()
            return {k: v.grad.copy() for k, v in tvars.items()}

        off = cfg.hp.replace(gamma=0.0)
        a, b = factor_grads(off, 1), factor_grads(off, 2)
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])
        on_a, on_b = factor_grads(cfg.hp, 1), factor_grads(cfg.hp, 2)
        assert any(not np.array_equal(on_a[k], on_b[k]) for k in on_a)

    def test_shape_mismatch(self):
        cfg = tiny_trn_config()
        with pytest.raises(ValueError, match="patches"):
            trn.joint_objective(trn.TrnModel(cfg), None, np.zeros((1, 3, 3, 4)), [1], cfg.hp)


class TestTrain:
    def test_reaches_full_training_accuracy(self, trained_trn):
        _, log = trained_trn
        assert log[-1]["final"] and log[-1]["train_accuracy"] == 1.0

    def test_log_records_every_term(self, trained_trn):
        _, log = trained_trn
        steps = log[:-1]
        assert [r["iter"] for r in steps] == list(range(len(steps)))
        for r in steps:
            assert set(r) == {"iter", "lr", "total", *trn.TERMS}
            assert r["total"] == pytest.approx(sum(r[k] for k in trn.TERMS), rel=1e-12)

    def test_backtracking_never_increases(self, trained_trn):
        totals = [r["total"] for r in trained_trn[1][:-1]]
        assert all(b <= a for a, b in zip(totals, totals[1:]))

    def test_cnn_baseline_has_no_tensor_terms(self, scene, split):
        cfg = small_config("CNN-baseline", max_iters=60)
        trained, log = trn.train(batch_for(scene, split, cfg), cfg)
        assert trained.tensors is None
        assert not any(k.startswith("sdtn.") for k in trained.params)
        for r in log[:-1]:
            assert r["recon"] == r["lowrank"] == r["reg"] == r["cons"] == 0.0
        assert log[-1]["train_accuracy"] == 1.0

    def test_cnn_baseline_tensor_gradients_vanish(self):
        cfg = tiny_trn_config("CNN-baseline")
        tensors = random_tensors(cfg, 2, 12)
        batch = tiny_batch(cfg, 2, 13)
        model = randomize(trn.TrnModel(cfg), np.random.default_rng(0))
        tvars = {k: Var(v) for k, v in tensors.named().items()}
        total, terms, _ = trn.joint_objective(model, tvars, batch.patches, batch.labels, cfg.hp)
        total.backward()
        assert terms["recon"] == terms["lowrank"] == terms["reg"] == terms["cons"] == 0.0
        for v in tvars.values():
            assert not np.any(v.grad)
        assert any(np.any(v.grad) for v in model.params().values())

    def test_deterministic(self, scene, split):
        cfg = small_config(max_iters=20)
        a = trn.train(batch_for(scene, split, cfg), cfg)
        b = trn.train(batch_for(scene, split, cfg), cfg)
        assert a[1] == b[1]
        for k in a[0].params:
            np.testing.assert_array_equal(a[0].params[k], b[0].params[k])

    def test_schedule_mode(self, scene, split):
        cfg = small_config(max_iters=5, step_mode="schedule", lr0=1e-4)
        _, log = trn.train(batch_for(scene, split, cfg), cfg)
        assert all(r["lr"] == 1e-4 for r in log[:-2])

    def test_divergence_reports_iteration(self, scene, split):
        cfg = small_config("CNN-baseline", max_iters=50, step_mode="schedule", lr0=1e6)
        with np.errstate(all="ignore"), pytest.raises(DivergenceError) as info:
            trn.train(batch_for(scene, split, cfg), cfg)
        assert info.value.iteration >= 1

    def test_rejects_als(self, scene, split):
        cfg = small_config(step_mode="als")
        with pytest.raises(ValueError, match="step_mode"):
            trn.train(batch_for(scene, split, cfg), cfg)

    def test_rejects_labels_beyond_classes(self):
        cfg = tiny_trn_config()
        with pytest.raises(ValueError, match="n_classes"):
            trn.train(trn.TrnBatch(np.zeros((1,) + cfg.patch_shape), [3]), cfg)


class TestPredictMap:
    def test_dims_and_training_pixels(self, trained_trn, scene, split):
        labels = trn.predict_map(trained_trn[0], scene.cube)
        assert labels.shape == scene.shape[:2]
        for (r, c), y in zip(split.train, split.train_labels):
            assert labels[r, c] == y

    def test_constant_cube(self, trained_trn):
        cube = np.broadcast_to(np.linspace(0.2, 0.8, 6), (5, 4, 6))
        labels = trn.predict_map(trained_trn[0], cube)
        assert labels.shape == (5, 4) and len(np.unique(labels)) == 1

    def test_band_mismatch(self, trained_trn):
        with pytest.raises(ValueError, match="cube"):
            trn.predict_map(trained_trn[0], np.zeros((4, 4, 5)))

    def test_chunking_is_invisible(self, trained_trn, scene):
        a = trn.predict_map(trained_trn[0], scene.cube[:5, :6])
        b = trn.predict_map(trained_trn[0], scene.cube[:5, :6], chunk=7)
        np.testing.assert_array_equal(a, b)

    def test_two_path_metrics(self, trained_trn, scene, split):
        labels = trn.predict_map(trained_trn[0], scene.cube)
        from_map = metrics.accumulate([labels[r, c] for r, c in split.test], split.test_labels, 3)
        probs = trn.predict_patches(trained_trn[0],
                                    hsi_data.extract_patches(scene, split.test, 3))
        stream = metrics.accumulate(np.argmax(probs, axis=1) + 1, split.test_labels, 3)
        np.testing.assert_array_equal(from_map.m, stream.m)
        assert metrics.oa(from_map) == metrics.oa(stream)

    @pytest.mark.parametrize("mode", ["TRN", "CNN-baseline"])
    def test_permutation_equivariant(self, scene, split, mode):
        cfg = small_config(mode, max_iters=25)
        perm = np.array([0, 3, 1, 2])  # class c becomes perm[c]
        base = batch_for(scene, split, cfg)
        swapped = trn.TrnBatch(base.patches, perm[base.labels])
        a = trn.predict_map(trn.train(base, cfg)[0], scene.cube)
        b = trn.predict_map(trn.train(swapped, cfg)[0], scene.cube)
        np.testing.assert_array_equal(perm[a], b)
