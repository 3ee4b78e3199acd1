import numpy as np
import pytest

from ddnn.data import compute_normalization, iterate_batches, make_synthetic_set, split_per_class
from ddnn.ekd import EkdWeights, attention_map, attention_mse, cross_entropy, kl_distillation, softmax_posterior
from ddnn.layers import global_avg_pool
from ddnn.network import SubnetSpec, build_ddnn, cifar_basic
from ddnn.tensor import NonFiniteError, Tensor, zero_grad
from ddnn.trainer import (
    EvalResult,
    LrSchedule,
    METRICS_COLUMNS,
    Sgd,
    TrainConfig,
    evaluate,
    lr_at,
    run_experiment,
    train_step,
)


def tiny_cfg(blocks=(2, 2), classes=4, hw=8):
    return cifar_basic(list(blocks), num_classes=classes, input_shape=(3, hw, hw))


def tiny_data(classes=4, per_class=24, hw=8, seed=0):
    images = make_synthetic_set(classes, per_class, size=(hw, hw), seed=seed,
                                signal=0.6, noise=0.25, max_shift=1)
    return split_per_class(images, classes, per_class * 3 // 4)


def make_train_config(regime="ddnn_ekd", **kwargs):
    defaults = dict(lr=LrSchedule(0.05, (4,)), momentum=0.9, weight_decay=1e-4,
                    batch_size=16, epochs=2, seed=0)
    defaults.update(kwargs)
    return TrainConfig(regime=regime, **defaults)


class TestLrSchedule:
    def test_paper_schedule_values(self):
        sched = LrSchedule(0.1, (150, 250))
        assert lr_at(sched, 0) == 0.1
        assert lr_at(sched, 149) == 0.1
        assert lr_at(sched, 150) == pytest.approx(0.01)
        assert lr_at(sched, 299) == pytest.approx(0.001)

    def test_validation(self):
        with pytest.raises(ValueError):
            LrSchedule(0.0)
        with pytest.raises(ValueError):
            LrSchedule(0.1, (10, 5))
        with pytest.raises(ValueError):
            LrSchedule(0.1, (), drop_factor=1.0)
        with pytest.raises(ValueError):
            lr_at(LrSchedule(0.1), -1)


class TestSgd:
    def test_plain_gradient_step_when_momentum_and_decay_off(self):
        p = Tensor(np.array([1.0, -2.0], dtype=np.float32), requires_grad=True)
        p.grad = np.array([0.5, 0.25], dtype=np.float32)
        expected = p.data - np.float32(0.1) * p.grad
        Sgd([p], momentum=0.0, weight_decay=0.0).step(0.1)
        assert p.data.tobytes() == expected.tobytes()

    def test_velocity_recurrence(self):
        p = Tensor(np.array([1.0], dtype=np.float64), requires_grad=True)
        opt = Sgd([p], momentum=0.9, weight_decay=0.01)
        w0 = 1.0
        p.grad = np.array([2.0])
        opt.step(0.1)
        v1 = 2.0 + 0.01 * w0
        w1 = w0 - 0.1 * v1
        np.testing.assert_allclose(p.data, [w1], rtol=1e-12)
        p.grad = np.array([1.0])
        opt.step(0.1)
        v2 = 0.9 * v1 + (1.0 + 0.01 * w1)
        np.testing.assert_allclose(p.data, [w1 - 0.1 * v2], rtol=1e-12)

    def test_none_grads_skipped(self):
        p = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
        before = p.data.copy()
        Sgd([p]).step(0.1)
        np.testing.assert_array_equal(p.data, before)


class TestTrainStep:
    def test_individual_reports_only_full_ce(self):
        ddnn = build_ddnn(tiny_cfg(), [SubnetSpec((2, 1))], seed=0)
        cfg = make_train_config("individual")
        opt = Sgd(ddnn.parameters(), cfg.momentum, cfg.weight_decay)
        (train, _) = tiny_data()
        batch, labels = next(iterate_batches(train, 16, dtype=np.float32))
        report, top1 = train_step(ddnn, batch, labels, cfg, opt, 0.05)
        assert report.ce_sub == [] and report.kl_sub == [] and report.att_sub == []
        assert report.total == report.ce_full
        assert set(top1) == {"full"}

    def test_hard_regime_reports_zero_distillation_terms(self):
        ddnn = build_ddnn(tiny_cfg(), [SubnetSpec((2, 1))], seed=0)
        cfg = make_train_config("ddnn_hard")
        opt = Sgd(ddnn.parameters(), cfg.momentum, cfg.weight_decay)
        (train, _) = tiny_data()
        batch, labels = next(iterate_batches(train, 16, dtype=np.float32))
        report, top1 = train_step(ddnn, batch, labels, cfg, opt, 0.05)
        assert report.kl_sub == [0.0] and report.att_sub == [0.0]
        assert report.ce_sub and report.ce_sub[0] > 0
        assert set(top1) == {"full", "sub1"}

    def test_ekd_regime_reports_all_terms(self):
        ddnn = build_ddnn(tiny_cfg(), [SubnetSpec((2, 1))], seed=0)
        cfg = make_train_config("ddnn_ekd")
        opt = Sgd(ddnn.parameters(), cfg.momentum, cfg.weight_decay)
        (train, _) = tiny_data()
        batch, labels = next(iterate_batches(train, 16, dtype=np.float32))
        report, _ = train_step(ddnn, batch, labels, cfg, opt, 0.05)
        assert report.kl_sub[0] >= 0.0 and report.att_sub[0] > 0.0

    def test_deterministic_loss_sequence(self):
        def run(steps=5):
            ddnn = build_ddnn(tiny_cfg(), [SubnetSpec((2, 1))], seed=3)
            cfg = make_train_config("ddnn_ekd", seed=3)
            opt = Sgd(ddnn.parameters(), cfg.momentum, cfg.weight_decay)
            (train, _) = tiny_data()
            rng = np.random.default_rng(3)
            out = []
            batches = iterate_batches(train * 3, 16, rng=rng, dtype=np.float32)
            for _ in range(steps):
                batch, labels = next(batches)
                report, _ = train_step(ddnn, batch, labels, cfg, opt, 0.05)
                out.append(report.total)
            return out
        assert run() == run()

    def test_zero_weight_ekd_is_bitwise_hard_label(self):
        def run(regime, weights):
            ddnn = build_ddnn(tiny_cfg(), [SubnetSpec((2, 1))], seed=4)
            cfg = make_train_config(regime, weights=weights, seed=4)
            opt = Sgd(ddnn.parameters(), cfg.momentum, cfg.weight_decay)
            (train, _) = tiny_data()
            rng = np.random.default_rng(4)
            reports = []
            batches = iterate_batches(train * 3, 16, rng=rng, dtype=np.float32)
            for _ in range(5):
                batch, labels = next(batches)
                report, _ = train_step(ddnn, batch, labels, cfg, opt, 0.05)
                reports.append((report.ce_full, tuple(report.ce_sub),
                                tuple(report.kl_sub), tuple(report.att_sub), report.total))
            state = {k: v.tobytes() for k, v in ddnn.named_state().items()}
            return reports, state

        hard_reports, hard_state = run("ddnn_hard", None)
        zero_reports, zero_state = run("ddnn_ekd", EkdWeights.uniform(1, 0.0, 0.0))
        assert hard_reports == zero_reports
        assert hard_state == zero_state

    def test_individual_matches_standalone_trainer_bitwise(self):
        seed, steps, lr, momentum, wd = 5, 10, 0.05, 0.9, 1e-4
        (train, _) = tiny_data(per_class=40)

        # trainer under test: DDNN in the individual regime (sub-net present but inert)
        ddnn = build_ddnn(tiny_cfg(), [SubnetSpec((2, 1))], seed=seed)
        cfg = make_train_config("individual", momentum=momentum, weight_decay=wd, seed=seed)
        opt = Sgd(ddnn.parameters(), momentum, wd)
        batches = iterate_batches(train * 2, 16, rng=np.random.default_rng(seed), dtype=np.float32)
        trained = []
        for _ in range(steps):
            batch, labels = next(batches)
            train_step(ddnn, batch, labels, cfg, opt, lr)
            trained.append({k: v.tobytes() for k, v in ddnn.named_state().items()})

        # standalone oracle: plain net, hand-rolled loop over the same stream
        plain = build_ddnn(tiny_cfg(), [], seed=seed)
        params = plain.parameters()
        velocity = [np.zeros_like(p.data) for p in params]
        batches = iterate_batches(train * 2, 16, rng=np.random.default_rng(seed), dtype=np.float32)
        for step in range(steps):
            batch, labels = next(batches)
            zero_grad(params)
            h = plain.stem.forward(batch, "train")
            for stage in plain.stages:
                for block in stage:
                    h = block.forward(h, "train")
            loss = cross_entropy(plain.classifier.forward(global_avg_pool(h)), labels)
            from ddnn.tensor import cast
            cast(loss, np.float64).backward()
            for p, v in zip(params, velocity):
                g = p.grad + np.float32(wd) * p.data
                v *= np.float32(momentum)
                v += g
                p.data -= np.float32(lr) * v
            oracle_state = {k: v.tobytes() for k, v in plain.named_state().items()}
            assert oracle_state == {k: v for k, v in trained[step].items()
                                    if not k.startswith("sub")}

    def test_one_step_perturbs_full_and_sub_outputs(self):
        ddnn = build_ddnn(tiny_cfg(), [SubnetSpec((2, 1))], seed=6)
        (train, _) = tiny_data()
        batch, labels = next(iterate_batches(train, 16, dtype=np.float32))
        before = [ddnn.forward_net(k, batch, "eval")[0].data.copy() for k in (0, 1)]
        cfg = make_train_config("ddnn_ekd", seed=6)
        opt = Sgd(ddnn.parameters(), cfg.momentum, cfg.weight_decay)
        train_step(ddnn, batch, labels, cfg, opt, 0.05)
        after = [ddnn.forward_net(k, batch, "eval")[0].data for k in (0, 1)]
        for b, a in zip(before, after):
            assert np.abs(a - b).max() > 0

    def test_distillation_gradients_skip_teacher_only_blocks(self):
        ddnn = build_ddnn(tiny_cfg((2, 2)), [SubnetSpec((2, 1))], seed=7)
        (train, _) = tiny_data()
        batch, labels = next(iterate_batches(train, 16, dtype=np.float32))
        results = ddnn.forward_all(batch, "train", stats_cache={})
        (logits0, feats0), (logits1, feats1) = results

        teacher_only = list(ddnn.stages[1][1].named_parameters())

        kl = kl_distillation(softmax_posterior(logits0), softmax_posterior(logits1))
        zero_grad(ddnn.parameters())
        for p in ddnn.parameters():
            p.grad = None
        kl.backward()
        assert all(p.grad is None for _, p in teacher_only)
        assert ddnn.classifier.weight.grad is not None

        for p in ddnn.parameters():
            p.grad = None
        att = attention_mse(attention_map(feats1[0]), attention_map(feats0[0]))
        att.backward()
        assert all(p.grad is None for _, p in teacher_only)
        # attention never touches the classifier by construction
        assert ddnn.classifier.weight.grad is None

    def test_nonfinite_loss_aborts_with_term_name(self):
        ddnn = build_ddnn(tiny_cfg(), [SubnetSpec((2, 1))], seed=8)
        ddnn.classifier.weight.data[0, 0] = np.nan
        cfg = make_train_config("ddnn_ekd", seed=8)
        opt = Sgd(ddnn.parameters(), cfg.momentum, cfg.weight_decay)
        (train, _) = tiny_data()
        batch, labels = next(iterate_batches(train, 16, dtype=np.float32))
        with pytest.raises(NonFiniteError, match="cross-entropy"):
            train_step(ddnn, batch, labels, cfg, opt, 0.05)


class TestEvaluate:
    def test_untrained_net_is_chance_level(self):
        cfg = cifar_basic([1, 1], num_classes=10, input_shape=(3, 8, 8))
        ddnn = build_ddnn(cfg, [], seed=0)
        images = make_synthetic_set(10, 40, size=(8, 8), seed=1)
        res = evaluate(ddnn, images, batch_size=100)
        assert abs(res[0].top1_err - 90.0) <= 3.0

    def test_memorizing_net_reaches_zero_error(self):
        cfg = tiny_cfg((1, 1), classes=2)
        ddnn = build_ddnn(cfg, [], seed=1)
        images = make_synthetic_set(2, 16, size=(8, 8), seed=2,
                                    signal=0.9, noise=0.05, max_shift=0)
        norm = compute_normalization(images)
        tc = make_train_config("individual", lr=LrSchedule(0.05, ()), batch_size=8)
        opt = Sgd(ddnn.parameters(), tc.momentum, tc.weight_decay)
        rng = np.random.default_rng(0)
        for _ in range(15):
            for batch, labels in iterate_batches(images, 8, rng=rng,
                                                 normalization=norm, dtype=np.float32):
                train_step(ddnn, batch, labels, tc, opt, 0.05)
            err = evaluate(ddnn, images, normalization=norm)[0].top1_err
            if err == 0.0:
                break
        assert err == 0.0

    def test_pure_and_repeatable(self):
        ddnn = build_ddnn(tiny_cfg(), [SubnetSpec((2, 1))], seed=2)
        images = make_synthetic_set(4, 10, size=(8, 8), seed=3)
        buffers_before = {k: v.tobytes() for k, v in ddnn.named_state().items()}
        a = evaluate(ddnn, images)
        b = evaluate(ddnn, images)
        assert [(r.net, r.top1_err, r.ce, r.kl, r.att) for r in a] == \
               [(r.net, r.top1_err, r.ce, r.kl, r.att) for r in b]
        assert buffers_before == {k: v.tobytes() for k, v in ddnn.named_state().items()}

    def test_empty_test_set_rejected(self):
        ddnn = build_ddnn(tiny_cfg(), [], seed=0)
        with pytest.raises(ValueError, match="empty"):
            evaluate(ddnn, [])

    def test_reports_all_nets_with_components(self):
        ddnn = build_ddnn(tiny_cfg(), [SubnetSpec((2, 1))], seed=3)
        images = make_synthetic_set(4, 10, size=(8, 8), seed=4)
        res = evaluate(ddnn, images, weights=EkdWeights((2.0,), (0.5,)))
        assert [r.net for r in res] == ["full", "sub1"]
        assert res[0].kl == 0.0 and res[1].kl >= 0.0
        np.testing.assert_allclose(res[1].total,
                                   res[1].ce + 2.0 * res[1].kl + 0.5 * res[1].att, rtol=1e-9)


class TestRunExperiment:
    def test_smoke_run_writes_artifacts(self, tmp_path):
        ddnn = build_ddnn(tiny_cfg(), [SubnetSpec((2, 1))], seed=0)
        (train, test) = tiny_data()
        cfg = make_train_config("ddnn_ekd", epochs=1)
        summary = run_experiment(ddnn, train, test, cfg, tmp_path, deterministic=True)
        metrics = (tmp_path / "metrics.csv").read_text().splitlines()
        assert metrics[0] == ",".join(METRICS_COLUMNS)
        assert len(metrics) >= 2
        assert (tmp_path / "best_full.ckpt").exists()
        assert (tmp_path / "best_sub1.ckpt").exists()
        assert set(summary["nets"]) == {"full", "sub1"}

    def test_regime_sweep_shares_schema(self, tmp_path):
        (train, test) = tiny_data()
        headers = set()
        for regime in ("individual", "ddnn_hard", "ddnn_ekd"):
            ddnn = build_ddnn(tiny_cfg(), [SubnetSpec((2, 1))], seed=0)
            cfg = make_train_config(regime, epochs=1)
            run_experiment(ddnn, train, test, cfg, tmp_path / regime, deterministic=True)
            headers.add((tmp_path / regime / "metrics.csv").read_text().splitlines()[0])
        assert headers == {",".join(METRICS_COLUMNS)}

    def test_zero_weight_ekd_metrics_match_hard_label(self, tmp_path):
        (train, test) = tiny_data()

        def once(regime, weights, out):
            ddnn = build_ddnn(tiny_cfg(), [SubnetSpec((2, 1))], seed=13)
            cfg = make_train_config(regime, weights=weights, epochs=1, seed=13)
            run_experiment(ddnn, train, test, cfg, out, deterministic=True)
            return (out / "metrics.csv").read_bytes()

        hard = once("ddnn_hard", None, tmp_path / "hard")
        zero = once("ddnn_ekd", EkdWeights.uniform(1, 0.0, 0.0), tmp_path / "zero")
        assert hard == zero

    def test_deterministic_reruns_are_bit_identical(self, tmp_path):
        def once(out):
            ddnn = build_ddnn(tiny_cfg(), [SubnetSpec((2, 1))], seed=11)
            (train, test) = tiny_data()
            cfg = make_train_config("ddnn_ekd", epochs=2, seed=11)
            run_experiment(ddnn, train, test, cfg, out, deterministic=True)
            return (out / "metrics.csv").read_bytes()
        assert once(tmp_path / "a") == once(tmp_path / "b")


class TestAblationFlags:
    @pytest.mark.parametrize("options", [
        dict(reforward_each_net=True),
        dict(teacher_grad=True),
        dict(unnormalized_subnet_ce=True),
        dict(att_aggregate="sum"),
    ])
    def test_flagged_variants_train(self, options):
        ddnn = build_ddnn(tiny_cfg(), [SubnetSpec((2, 1))], seed=0)
        cfg = make_train_config("ddnn_ekd", **options)
        opt = Sgd(ddnn.parameters(), cfg.momentum, cfg.weight_decay)
        (train, _) = tiny_data()
        batch, labels = next(iterate_batches(train, 16, dtype=np.float32))
        report, _ = train_step(ddnn, batch, labels, cfg, opt, 0.05)
        assert np.isfinite(report.total)

    def test_preact_and_private_classifier_variant(self):
        cfg = cifar_basic([2, 2], num_classes=4, input_shape=(3, 8, 8),
                          block_variant="pre")
        ddnn = build_ddnn(cfg, [SubnetSpec((2, 1), "private")], seed=0)
        assert 1 in ddnn.private_classifiers
        tc = make_train_config("ddnn_ekd")
        opt = Sgd(ddnn.parameters(), tc.momentum, tc.weight_decay)
        (train, _) = tiny_data()
        batch, labels = next(iterate_batches(train, 16, dtype=np.float32))
        report, _ = train_step(ddnn, batch, labels, tc, opt, 0.05)
        assert np.isfinite(report.total)
        assert ddnn.private_classifiers[1].weight.grad is not None
        # the private head trains only through the sub-net path
        reference = build_ddnn(cfg, [SubnetSpec((2, 1), "private")], seed=0)
        assert (ddnn.classifier.weight.data.tobytes()
                != reference.classifier.weight.data.tobytes())

    def test_teacher_grad_reaches_teacher_only_blocks(self):
        ddnn = build_ddnn(tiny_cfg((2, 2)), [SubnetSpec((2, 1))], seed=9)
        (train, _) = tiny_data()
        batch, labels = next(iterate_batches(train, 16, dtype=np.float32))
        results = ddnn.forward_all(batch, "train", stats_cache={})
        (logits0, _), (logits1, _) = results
        for p in ddnn.parameters():
            p.grad = None
        kl_distillation(softmax_posterior(logits0), softmax_posterior(logits1),
                        teacher_grad=True).backward()
        teacher_only = list(ddnn.stages[1][1].named_parameters())
        assert any(p.grad is not None for _, p in teacher_only)


class TestConfigValidation:
    def test_bad_regime(self):
        with pytest.raises(ValueError, match="regime"):
            TrainConfig(regime="warmup")

    def test_weights_length_checked_against_subnets(self):
        cfg = make_train_config("ddnn_ekd", weights=EkdWeights.uniform(2))
        with pytest.raises(ValueError, match="sub-nets"):
            cfg.effective_weights(1)
