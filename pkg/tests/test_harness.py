import numpy as np
import pytest

from promptcl.config import (DatasetSettings, ExperimentConfig, OptimSettings,
                             PromptSettings, QRSettings, VitSettings)
from promptcl.datasets import synth_generate
from promptcl.errors import ConfigError, ContractError
from promptcl.harness import (AccuracyMatrix, drift_analysis,
                              load_run_snapshot, metric_an, metric_fn, pretrain_backbone,
                              run_experiment, save_run_snapshot, split_tasks)
from promptcl.seeding import substream
from promptcl.vit import ViTConfig, ViTModel


def micro_config(**over):
    kw = dict(
        seed=0, method="prompt", base_classes=4, continual_classes=8, tasks=2,
        dataset=DatasetSettings(per_class_train=8, per_class_test=4),
        vit=VitSettings(image_size=16, patch_size=8, depth=3, dim=16, heads=2,
                        mlp_ratio=2, prompted_layers=(1, 2)),
        prompt=PromptSettings(components=8, length=4),
        qr=QRSettings(enabled=False),
        optim=OptimSettings(lr=1e-3, epochs=1, batch=16, pretrain_epochs=1),
    )
    kw.update(over)
    return ExperimentConfig(**kw)


def micro_sets(seed=0, classes=8):
    train = synth_generate(classes, 6, 16, seed, "train")
    test = synth_generate(classes, 3, 16, seed, "test")
    return train, test


class TestSplitTasks:
    def test_equal_chunks(self):
        train, test = micro_sets()
        stream = split_tasks(train, test, 2, permutation_seed=0)
        assert stream.num_tasks == 2
        assert stream.classes_per_task == 4
        assert all(len(t.class_ids) == 4 for t in stream.tasks)

    def test_class_sets_disjoint_and_cover(self):
        train, test = micro_sets()
        stream = split_tasks(train, test, 4, permutation_seed=3)
        seen = [c for t in stream.tasks for c in t.class_ids]
        assert sorted(seen) == list(range(8))

    def test_same_seed_identical_stream(self):
        train, test = micro_sets()
        a = split_tasks(train, test, 2, 5)
        b = split_tasks(train, test, 2, 5)
        assert [t.class_ids for t in a.tasks] == [t.class_ids for t in b.tasks]
        assert all(np.array_equal(x.train.images, y.train.images)
                   for x, y in zip(a.tasks, b.tasks))

    def test_distinct_seeds_distinct_permutations(self):
        train, test = micro_sets(classes=8)
        orders = {tuple(c for t in split_tasks(train, test, 2, s).tasks for c in t.class_ids)
                  for s in range(5)}
        assert len(orders) == 5

    def test_indivisible_classes_rejected(self):
        train, test = micro_sets(classes=8)
        with pytest.raises(ConfigError):
            split_tasks(train, test, 3, 0)

    def test_dense_labels_per_task_range(self):
        train, test = micro_sets()
        stream = split_tasks(train, test, 2, 1)
        for t, task in enumerate(stream.tasks):
            assert task.train.labels.min() >= t * 4
            assert task.train.labels.max() < (t + 1) * 4

    def test_access_log_records_only_requested_task(self):
        train, test = micro_sets()
        stream = split_tasks(train, test, 2, 0)
        stream.train_batch(1, np.array([0, 3, 5]))
        (task, ids), = stream.access_log
        assert task == 1
        assert set(ids) <= set(int(i) for i in stream.tasks[1].train_ids)


class TestMetrics:
    def test_single_task(self):
        m = AccuracyMatrix([[0.9]])
        assert metric_an(m, 1) == 0.9
        assert metric_fn(m, 1) == 0.0

    def test_hand_example(self):
        m = AccuracyMatrix([[0.9], [0.8, 0.7]])
        assert metric_an(m, 2) == pytest.approx(0.75)
        assert metric_fn(m, 2) == pytest.approx(0.1)

    def test_monotone_improvement_gives_zero_forgetting(self):
        m = AccuracyMatrix([[0.5], [0.6, 0.7], [0.9, 0.9, 0.9]])
        assert metric_fn(m, 3) == 0.0

    def test_drops_clamped_per_task(self):
        m = AccuracyMatrix([[0.5], [0.9, 0.8]])
        # task 1 improved; clamp keeps its contribution at zero
        assert metric_fn(m, 2) == 0.0

    def test_incomplete_matrix_rejected(self):
        m = AccuracyMatrix([[0.9]])
        with pytest.raises(ContractError):
            metric_an(m, 2)

    def test_bad_row_shape_rejected(self):
        with pytest.raises(ContractError):
            AccuracyMatrix([[0.9, 0.8]])
        m = AccuracyMatrix()
        with pytest.raises(ContractError):
            m.add_row([0.9, 0.8])


class TestPretrain:
    def test_zero_epochs_gives_random_frozen_backbone(self):
        model = ViTModel(ViTConfig(image_size=16, patch_size=8, depth=3, dim=16, heads=2,
                                   mlp_ratio=2, num_classes=4, prompted_layers=(1, 2),
                                   prompt_length=4), np.random.default_rng(0))
        before = model.backbone_checksum()
        train, _ = micro_sets(classes=4)
        out = pretrain_backbone(model, train, 0, 1e-3, 16, substream(0, "order"))
        assert out.frozen
        assert out.backbone_checksum() == before

    def test_overlapping_base_classes_rejected(self):
        model = ViTModel(ViTConfig(image_size=16, patch_size=8, depth=3, dim=16, heads=2,
                                   mlp_ratio=2, num_classes=4, prompted_layers=(1, 2),
                                   prompt_length=4), np.random.default_rng(0))
        train, _ = micro_sets(classes=4)
        with pytest.raises(ConfigError, match="overlap"):
            pretrain_backbone(model, train, 1, 1e-3, 16, substream(0, "order"),
                              forbidden_class_ids=[2, 9])

    def test_training_changes_weights_then_freezes(self):
        model = ViTModel(ViTConfig(image_size=16, patch_size=8, depth=3, dim=16, heads=2,
                                   mlp_ratio=2, num_classes=4, prompted_layers=(1, 2),
                                   prompt_length=4), np.random.default_rng(1))
        before = model.backbone_checksum()
        train, _ = micro_sets(classes=4)
        out = pretrain_backbone(model, train, 1, 1e-3, 16, substream(0, "order"))
        assert out.backbone_checksum() != before
        assert out.frozen

    def test_base_split_train_accuracy_beats_chance(self):
        import promptcl.autograd as ag
        model = ViTModel(ViTConfig(image_size=16, patch_size=8, depth=3, dim=16, heads=2,
                                   mlp_ratio=2, num_classes=4, prompted_layers=(1, 2),
                                   prompt_length=4), np.random.default_rng(2))
        train = synth_generate(4, 16, 16, seed=11, split="train")
        out = pretrain_backbone(model, train, 8, 1e-3, 16, substream(3, "order"))
        with ag.no_grad():
            rec = out.forward(train.images)
        acc = float((rec.logits.data.argmax(1) == train.labels).mean())
        assert acc > 0.25 + 0.15  # chance is 1/4


class TestTrainerContracts:
    def test_out_of_order_task_rejected(self):
        cfg = micro_config()
        keep = []
        run_experiment(cfg, keep_trainer=keep)
        trainer = keep[0]
        with pytest.raises(ContractError):
            trainer.train_task(0)  # already completed

    def test_access_log_no_rehearsal(self):
        keep = []
        run_experiment(micro_config(), keep_trainer=keep)
        trainer = keep[0]
        for task, ids in trainer.stream.access_log:
            allowed = set(int(i) for i in trainer.stream.tasks[task].train_ids)
            assert set(ids) <= allowed

    def test_backbone_checksum_constant_for_prompt_mode(self):
        keep = []
        run_experiment(micro_config(), keep_trainer=keep)
        trainer = keep[0]
        checks = {s.model.backbone_checksum() for s in trainer.snapshots}
        assert len(checks) == 1

    def test_past_prompt_partitions_frozen(self):
        keep = []
        run_experiment(micro_config(), keep_trainer=keep)
        trainer = keep[0]
        snap_after_1, snap_final = trainer.snapshots[0], trainer.snapshots[-1]
        assert snap_after_1.pool.chunk_bytes(0) == snap_final.pool.chunk_bytes(0)

    def test_same_seed_runs_bit_identical(self):
        a = run_experiment(micro_config())
        b = run_experiment(micro_config())
        assert a.result_json() == b.result_json()

    def test_one_vs_two_stage_share_init_and_data_order(self):
        keep_a, keep_b = [], []
        run_experiment(micro_config(), keep_trainer=keep_a)
        run_experiment(micro_config(prompt=PromptSettings(components=8, length=4,
                                                          query="two_stage")),
                       keep_trainer=keep_b)
        one, two = keep_a[0], keep_b[0]
        assert one.model.backbone_checksum() == two.model.backbone_checksum()
        assert [ids for _, ids in one.stream.access_log] == \
            [ids for _, ids in two.stream.access_log]

    def test_ub_reports_absent_forgetting(self):
        res = run_experiment(micro_config(method="ub"))
        assert res.f_n is None
        assert len(res.accuracy_rows) == 1 and len(res.accuracy_rows[0]) == 2
        assert '"f_n": null' in res.result_json()

    def test_metrics_recomputable_from_matrix(self):
        res = run_experiment(micro_config())
        m = AccuracyMatrix(res.accuracy_rows)
        assert metric_an(m, 2) == res.a_n
        assert metric_fn(m, 2) == res.f_n

    def test_topk_formation_runs_end_to_end(self):
        cfg = micro_config(prompt=PromptSettings(components=8, length=4,
                                                 formation="topk", topk_n=2))
        res = run_experiment(cfg)
        assert len(res.accuracy_rows) == 2

    def test_query_gradient_toggle_changes_training(self):
        base = run_experiment(micro_config(optim=OptimSettings(
            lr=1e-2, epochs=2, batch=16, pretrain_epochs=1)))
        toggled = run_experiment(micro_config(
            prompt=PromptSettings(components=8, length=4, query_gradient=True),
            optim=OptimSettings(lr=1e-2, epochs=2, batch=16, pretrain_epochs=1)))
        assert base.result_json() != toggled.result_json()


class TestEvaluation:
    def test_chance_level_with_random_head(self):
        # untrained everything: accuracy near 1/(classes seen)
        cfg = micro_config(optim=OptimSettings(lr=1e-3, epochs=0, batch=16, pretrain_epochs=0),
                           dataset=DatasetSettings(per_class_train=8, per_class_test=32))
        res = run_experiment(cfg)
        final = res.accuracy_rows[-1]
        assert all(acc < 0.45 for acc in final)  # 8 classes, chance 0.125

    def test_rows_lengths_lower_triangular(self):
        res = run_experiment(micro_config(tasks=2))
        assert [len(r) for r in res.accuracy_rows] == [1, 2]


class TestDrift:
    def test_identical_snapshots_exact_zero(self):
        keep = []
        run_experiment(micro_config(), keep_trainer=keep)
        snap = keep[0].snapshots[-1]
        images = keep[0].stream.analysis_train_images(0)
        table = drift_analysis(snap, snap, images)
        assert all(row["distance"] == 0.0 for row in table)

    def test_values_in_range_and_layer_one_stable(self):
        keep = []
        res = run_experiment(micro_config(), keep_trainer=keep)
        assert len(res.drift) == 4  # depth + 1
        for row in res.drift:
            assert 0.0 <= row["distance"] <= 2.0
        assert res.drift[0]["distance"] == 0.0  # patch embed is frozen

    def test_architecture_mismatch_rejected(self):
        keep_a, keep_b = [], []
        run_experiment(micro_config(), keep_trainer=keep_a)
        run_experiment(micro_config(vit=VitSettings(image_size=16, patch_size=4, depth=3,
                                                    dim=16, heads=2, mlp_ratio=2,
                                                    prompted_layers=(1, 2))), keep_trainer=keep_b)
        with pytest.raises(ContractError):
            drift_analysis(keep_a[0].snapshots[0], keep_b[0].snapshots[0],
                           keep_a[0].stream.analysis_train_images(0))


class TestSnapshotPersistence:
    def test_roundtrip_preserves_predictions(self, tmp_path):
        keep = []
        run_experiment(micro_config(), keep_trainer=keep)
        snap = keep[0].snapshots[-1]
        save_run_snapshot(str(tmp_path / "snap"), snap, micro_config())
        loaded = load_run_snapshot(str(tmp_path / "snap"))
        images = keep[0].stream.analysis_train_images(0)[:4]
        a = snap.layer_cls_embeddings(images)
        b = loaded.layer_cls_embeddings(images)
        for x, y in zip(a, b):
            assert np.array_equal(x, y)
