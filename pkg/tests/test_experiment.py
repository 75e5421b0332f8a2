"""
Tests for pretraining, fine-tuning, evaluation and the cross-validation and
ablation drivers.
"""
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from analyze import ablation_ordering, mean_auc
from src.checkpoint import load_checkpoint
from src.config import CohortConfig, Mode, RunConfig, SplitName, TASKS, Variant
from src.errors import ConfigError, EmptyInputError, ProtocolViolation
from src.experiment import (
    BatchSampler, Experiment, ablate, evaluate, imputation_quality, pretrain_cggm,
    summarize_folds, train,
)
from src.model import GMENet
from src.synth import expansion_report, generate_cohort, split_cohort
from src.utils import moving_average, read_events


@pytest.fixture
def run_config(small_run_config, tmp_path):
    return replace(small_run_config, log_dir=str(tmp_path / "logs"))


@pytest.fixture
def by_id(small_cohort):
    return {r.id: r for r in small_cohort}


@pytest.fixture
def pretrained(run_config, small_plan, by_id):
    return pretrain_cggm(run_config, [by_id[i] for i in small_plan.fs_train_ids(0)], fold=0)


class TestBatchSampler:
    def test_epochs_cover_every_index(self, rng):
        sampler = BatchSampler(10, 4, rng)
        seen = np.concatenate([sampler.next() for _ in range(3)])
        assert sorted(seen.tolist()) == list(range(10))

    def test_state_round_trip(self):
        a = BatchSampler(7, 3, np.random.default_rng(1))
        a.next()
        b = BatchSampler(7, 3, np.random.default_rng(99))
        b.load_state(a.state())
        np.testing.assert_array_equal(a.next(), b.next())

    def test_empty(self, rng):
        with pytest.raises(EmptyInputError):
            BatchSampler(0, 4, rng)


class TestPretrain:
    def test_zero_steps_saves_initialization(self, run_config, small_plan, by_id, tmp_path):
        cfg = replace(run_config, pretrain_steps=0)
        path = tmp_path / "cggm.ckpt"
        result = pretrain_cggm(cfg, [by_id[i] for i in small_plan.fs_train_ids(0)], out_path=str(path))
        assert len(result.curve) == 0
        assert list(result.curve.columns) == ["step", "mse", "kl", "cycle", "total"]
        ckpt = load_checkpoint(str(path))
        assert ckpt.kind == "cggm"
        init = GMENet(cfg)
        assert set(ckpt.params) == set(init.store.names("stem.") + init.store.names("cggm."))
        for name, value in ckpt.params.items():
            np.testing.assert_array_equal(value, init.store[name])

    def test_deterministic(self, run_config, small_plan, by_id, tmp_path):
        records = [by_id[i] for i in small_plan.fs_train_ids(1)]
        a = load_checkpoint(str(pretrain_cggm(run_config, records, out_path=str(tmp_path / "a.ckpt")).checkpoint_path))
        b = load_checkpoint(str(pretrain_cggm(run_config, records, out_path=str(tmp_path / "b.ckpt")).checkpoint_path))
        for name in a.params:
            np.testing.assert_array_equal(a.params[name], b.params[name])

    def test_curve_logged(self, pretrained, run_config):
        curve = pretrained.curve
        assert len(curve) == run_config.pretrain_steps
        assert (curve[["mse", "kl", "cycle"]] >= 0).all().all()
        np.testing.assert_allclose(curve["total"], curve["mse"] + curve["kl"] + curve["cycle"], atol=1e-12)

    def test_errors(self, run_config, small_cohort):
        complete = [r for r in small_cohort if r.is_complete]
        with pytest.raises(ConfigError):
            pretrain_cggm(replace(run_config, variant=Variant.NO_CGGM), complete)
        with pytest.raises(EmptyInputError):
            pretrain_cggm(run_config, [])
        with pytest.raises(ProtocolViolation):
            pretrain_cggm(run_config, [r for r in small_cohort if not r.is_complete][:3])


class TestTrain:
    def test_cggm_frozen_throughout(self, run_config, by_id, small_plan, pretrained):
        result = train(run_config, by_id, small_plan, 0, cggm=pretrained)
        for name in pretrained.model.store.names("cggm."):
            np.testing.assert_array_equal(result.model.store[name], pretrained.model.store[name])
        changed = [n for n in result.model.store.names("head.")
                   if not np.array_equal(result.model.store[n], GMENet(run_config).store[n])]
        assert changed
        assert len(result.losses) == run_config.finetune_steps

    def test_no_held_out_record_in_gradients(self, run_config, by_id, small_plan, pretrained):
        result = train(run_config, by_id, small_plan, 2, cggm=pretrained)
        held_out = set(small_plan.validation_ids(2)) | set(small_plan.internal_test) | set(small_plan.independent_test)
        assert not result.gradient_ids & held_out
        assert result.gradient_ids <= set(small_plan.train_ids(2, Mode.MS))

    def test_fs_mode_ignores_incomplete(self, run_config, by_id, small_plan, pretrained):
        cfg = replace(run_config, mode=Mode.FS, finetune_steps=30)
        result = train(cfg, by_id, small_plan, 0, cggm=pretrained)
        assert all(by_id[i].is_complete for i in result.gradient_ids)
        assert not result.gradient_ids & set(small_plan.incomplete)

    def test_leak_detected(self, run_config, by_id, small_plan, pretrained):
        broken = small_plan.with_mode(Mode.MS)
        broken.incomplete.append(broken.internal_test[0])
        with pytest.raises(ProtocolViolation):
            train(run_config, by_id, broken, 0, cggm=pretrained)

    def test_checkpoint_rules(self, run_config, by_id, small_plan, pretrained):
        with pytest.raises(ConfigError):
            train(run_config, by_id, small_plan, 0, cggm=None)
        with pytest.raises(ConfigError):
            train(replace(run_config, variant=Variant.NO_CGGM), by_id, small_plan, 0, cggm=pretrained)
        with pytest.raises(ConfigError):
            train(run_config, by_id, small_plan, 0, cggm="does/not/exist.ckpt")
        result = train(replace(run_config, variant=Variant.NO_CGGM), by_id, small_plan, 0)
        assert not result.model.store.names("cggm.")

    def test_resume_matches_uninterrupted_run(self, run_config, by_id, small_plan, pretrained, tmp_path):
        state_path = str(tmp_path / "state.ckpt")
        full = train(run_config, by_id, small_plan, 0, cggm=pretrained)
        train(replace(run_config, finetune_steps=10), by_id, small_plan, 0, cggm=pretrained, state_path=state_path)
        resumed = train(run_config, by_id, small_plan, 0, cggm=pretrained, state_path=state_path, resume=True)
        assert resumed.losses["step"].tolist() == list(range(11, run_config.finetune_steps + 1))
        for name in full.model.store.names():
            np.testing.assert_array_equal(resumed.model.store[name], full.model.store[name])
        np.testing.assert_array_equal(resumed.losses["loss"].to_numpy(), full.losses["loss"].to_numpy()[10:])


class TestEvaluate:
    def test_repeatable(self, run_config, by_id, small_plan, pretrained):
        model = train(run_config, by_id, small_plan, 0, cggm=pretrained).model
        records = [by_id[i] for i in small_plan.internal_test]
        first = evaluate(model, records, SplitName.INTERNAL.value)
        second = evaluate(model, records, SplitName.INTERNAL.value)
        pd.testing.assert_frame_equal(first.report.to_frame("internal"), second.report.to_frame("internal"))
        frame = first.prediction_frame()
        assert len(frame) == len(records)
        assert {"split", "id", "idh_true", "pathology_pred"} <= set(frame.columns)

    def test_errors(self, run_config, small_cohort):
        model = GMENet(replace(run_config, variant=Variant.NO_CGGM))
        with pytest.raises(EmptyInputError):
            evaluate(model, [])
        with pytest.raises(ProtocolViolation):
            evaluate(model, [r for r in small_cohort if not r.is_complete][:2])


def test_summarize_folds_is_arithmetic_mean():
    frame = pd.DataFrame({
        "split": ["internal"] * 3, "task": ["idh"] * 3,
        "acc": [0.5, 0.7, 0.9], "auc": [0.6, None, 0.8], "spe": [1.0, 1.0, 1.0], "sen": [0.0, 0.5, 1.0],
    })
    summary = summarize_folds(frame)
    assert summary.loc[0, "acc_mean"] == pytest.approx(0.7)
    assert summary.loc[0, "auc_mean"] == pytest.approx(0.7)
    assert summary.loc[0, "acc_std"] == pytest.approx(0.2)
    assert summary.loc[0, "folds"] == 3


class TestDrivers:
    def test_cross_validate_writes_tables(self, run_config, small_cohort, small_plan, tmp_path):
        out = tmp_path / "cv_ms.csv"
        metrics = Experiment(run_config, small_cohort, small_plan, out_path=str(out), run_id="cv_test") \
            .setup().cross_validate([0])
        assert len(metrics) == 3 * len(TASKS)
        assert list(metrics.columns) == ["fold", "split", "task", "acc", "auc", "spe", "sen", "n"]
        for suffix in ("summary", "roc", "confusion", "class_sen", "pretrain_fold0"):
            assert (tmp_path / f"cv_ms_{suffix}.csv").exists()
        events = read_events(tmp_path / "logs" / "single_runs" / "cv_test.jsonl")
        kinds = [e["type"] for e in events]
        assert kinds[0] == "run_start" and kinds[-1] == "run_end"
        assert "fold_end" in kinds and "train_step" in kinds and "pretrain_step" in kinds

    def test_cross_validate_is_deterministic(self, run_config, small_cohort, small_plan, tmp_path):
        paths = []
        for name in ("a", "b"):
            path = tmp_path / f"{name}.csv"
            Experiment(run_config, small_cohort, small_plan, out_path=str(path), run_id=name).setup().cross_validate([1])
            paths.append(path)
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_ablate_table_shape(self, run_config, small_cohort, small_plan, tmp_path):
        out = tmp_path / "ablation.csv"
        table = ablate(run_config, small_cohort, small_plan, seeds=[0], folds=[0], out_path=str(out))
        assert len(table) == 3 * 2 * 3
        assert set(table["variant"]) == {v.value for v in Variant}
        assert set(table["split"]) == {"internal", "independent"}
        per_seed = pd.read_csv(tmp_path / "ablation_per_seed.csv")
        assert set(per_seed["seed"]) == {0}
        assert len(per_seed) == 18

    def test_imputation_quality(self, run_config, small_cohort, small_plan):
        report = imputation_quality(run_config, small_cohort, small_plan, fold=0)
        assert len(report) == 2
        assert (report["n"] == len(small_plan.internal_test)).all()


@pytest.mark.slow
class TestAcceptance:
    """Default dims on the default-shaped cohort; minutes, not seconds."""

    @pytest.fixture(scope="class")
    def default_cohort(self):
        cohort = generate_cohort(CohortConfig())
        return cohort, split_cohort(cohort, seed=0)

    def test_imputation_beats_zero_and_mean_fill(self):
        passed = []
        for seed in (0, 1, 2):
            cohort = generate_cohort(CohortConfig(coupling=0.9, seed=seed))
            report = imputation_quality(RunConfig(seed=seed), cohort, split_cohort(cohort, seed=seed))
            passed.append(bool(
                (report["cggm_mse"] < 0.5 * report["zero_fill_mse"]).all()
                and (report["cggm_mse"] < report["mean_fill_mse"]).all()
            ))
        assert sum(passed) >= 2, passed

    def test_pretrain_curve_smoothed_decreasing(self, default_cohort):
        cohort, plan = default_cohort
        by_id = {r.id: r for r in cohort}
        curve = pretrain_cggm(RunConfig(pretrain_steps=600), [by_id[i] for i in plan.fs_train_ids(0)], fold=0).curve
        smoothed = moving_average(curve["total"], 50)
        blocks = smoothed[::50]
        assert np.all(np.diff(blocks) <= 0.03 * blocks[0]), blocks
        assert blocks[-1] < 0.8 * blocks[0]

    def test_full_variant_beats_ablations(self, default_cohort, tmp_path):
        cohort, plan = default_cohort
        out = tmp_path / "ablation.csv"
        ablate(RunConfig(log_dir=str(tmp_path / "logs")), cohort, plan, seeds=[0, 1, 2], folds=[0, 1],
               out_path=str(out))
        per_seed = pd.read_csv(tmp_path / "ablation_per_seed.csv")
        independent = per_seed[per_seed["split"] == SplitName.INDEPENDENT.value]
        assert independent["auc"].max() < 1.0
        result = ablation_ordering(per_seed)
        assert result["seed_wins"] >= 2, result["by_seed"]

    def test_mixed_sequence_training_not_worse(self, default_cohort, tmp_path):
        cohort, plan = default_cohort
        assert expansion_report(plan)["incomplete_share_of_ms"] >= 0.4
        wins = []
        for seed in (0, 1, 2):
            aucs = {}
            for mode in (Mode.FS, Mode.MS):
                cfg = RunConfig(seed=seed, mode=mode, log_dir=str(tmp_path / "logs"))
                metrics = Experiment(cfg, cohort, plan, run_id=f"{mode.value}_{seed}").setup().cross_validate([0, 1])
                aucs[mode] = mean_auc(metrics)
            wins.append(aucs[Mode.MS] >= aucs[Mode.FS])
        assert sum(wins) >= 2, wins

    def test_pretraining_reduces_reconstruction_loss(self, run_config, small_plan, by_id):
        cfg = replace(run_config, pretrain_steps=200)
        records = [by_id[i] for i in small_plan.fs_train_ids(0)]
        ratios = []
        for seed in (0, 1, 2):
            curve = pretrain_cggm(replace(cfg, seed=seed), records, fold=0).curve["total"]
            ratios.append(curve.iloc[-20:].mean() / curve.iloc[:20].mean())
        assert np.mean(ratios) < 0.7

    def test_separable_cohort_is_learned(self, tmp_path):
        cohort = generate_cohort(CohortConfig(
            counts={"TCGA": 100, "BRATS": 30, "RJ": 40, "TH": 40, "XH": 0, "HS": 0},
            class_separation=4.0, noise_scale=0.1, shift_magnitude=0.0,
            raw_dim=8, latent_factors=4, seed=11,
        ))
        plan = split_cohort(cohort, seed=0)
        by_id = {r.id: r for r in cohort}
        cfg = _separable_config(tmp_path)
        pre = pretrain_cggm(cfg, [by_id[i] for i in plan.fs_train_ids(0)], fold=0)
        model = train(cfg, by_id, plan, 0, cggm=pre).model
        held_out = [by_id[i] for i in plan.internal_test + plan.independent_test]
        report = evaluate(model, held_out, "held_out").report
        for task in TASKS:
            assert report.tasks[task].acc > 0.9


def _separable_config(tmp_path):
    return RunConfig(
        latent_dim=16, raw_dim=8, num_tokens=4, num_heads=2, batch_size=32,
        pretrain_steps=50, finetune_steps=200, learning_rate=1e-2, pretrain_learning_rate=1e-2,
        log_every=50, log_dir=str(tmp_path / "logs"),
    )
