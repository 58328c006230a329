"""Training-step behavior of the three semi-supervised paradigms."""

import copy
import math

import numpy as np
import pytest
import torch

from adamix.data_synth import DatasetSpec, SegDataset, generate
from adamix.models import build_model, make_optimizer
from adamix.selfpaced import AgeSchedule
from adamix.ssl import (STEPLOG_COLUMNS, Batch, ParadigmConfig, StepLog,
                        WeakAugParams, draw_pixel_params, partner_index,
                        strong_aug_pixel, train_step_ct, train_step_mt,
                        train_step_st, weak_aug)

SEED_PAIR = (11, 12)


@pytest.fixture(scope="module")
def data32():
    spec = DatasetSpec(n_train=12, n_val=1, n_test=1, labeled_fraction=0.5,
                       image_size=32, seed=0)
    return SegDataset(generate(spec))


def sample(ds, i):
    return (torch.from_numpy(ds.image(i)),
            torch.from_numpy(ds.label(i)))


@pytest.fixture()
def batch(data32):
    img2, lab2 = sample(data32, "s0002")
    img4, lab4 = sample(data32, "s0004")
    return Batch(labeled=[(img2, lab2), (img4, lab4)],
                 unlabeled=[torch.from_numpy(data32.image("s0006")),
                            torch.from_numpy(data32.image("s0007"))])


def params_equal(a, b) -> bool:
    return all(torch.equal(pa, pb)
               for pa, pb in zip(a.parameters(), b.parameters()))


def param_distance(a, b) -> float:
    return math.fsum(float((pa - pb).abs().sum().detach())
                     for pa, pb in zip(a.parameters(), b.parameters()))


def fresh_rngs(offset=0):
    return (np.random.default_rng(SEED_PAIR[0] + offset),
            np.random.default_rng(SEED_PAIR[1] + offset))


class TestParadigmConfig:
    def test_defaults_are_valid(self):
        ParadigmConfig().validate()

    def test_json_roundtrip(self):
        cfg = ParadigmConfig(paradigm="mean_teacher", strategy="umix",
                             tau=0.9, max_patches=8, patch_size=4,
                             ema_alpha=0.95, unsup_weight=0.5)
        again = ParadigmConfig.from_json_dict(cfg.to_json_dict())
        assert again == cfg

    def test_rejects_unknown_keys(self):
        data = ParadigmConfig().to_json_dict()
        data["paradgim"] = "self_training"
        with pytest.raises(ValueError):
            ParadigmConfig.from_json_dict(data)

    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            ParadigmConfig(paradigm="montecarlo").validate()
        with pytest.raises(ValueError):
            ParadigmConfig(strategy="blend").validate()
        with pytest.raises(ValueError):
            ParadigmConfig(tau=1.5).validate()
        with pytest.raises(ValueError):
            ParadigmConfig(ema_alpha=-0.1).validate()


class TestPartnerIndex:
    def test_even_batch_reverses(self):
        assert [partner_index(i, 4) for i in range(4)] == [3, 2, 1, 0]

    def test_odd_batch_rotates(self):
        assert [partner_index(i, 3) for i in range(3)] == [1, 2, 0]

    def test_no_self_pairing_above_one(self):
        for size in range(2, 9):
            assert all(partner_index(i, size) != i for i in range(size))

    def test_singleton_pairs_with_itself(self):
        assert partner_index(0, 1) == 0


class TestAugmentations:
    def test_identity_draw_is_noop(self, rng):
        image = torch.rand(1, 8, 8)
        label = torch.randint(0, 3, (8, 8))
        params = WeakAugParams(flip_h=False, flip_v=False, quarter_turns=0)
        out_img, out_lab = weak_aug(image, label, params=params)
        assert torch.equal(out_img, image)
        assert torch.equal(out_lab, label)

    def test_flip_twice_restores(self):
        image = torch.rand(1, 8, 8)
        params = WeakAugParams(flip_h=True, flip_v=False, quarter_turns=0)
        once, _ = weak_aug(image, params=params)
        twice, _ = weak_aug(once, params=params)
        assert torch.equal(twice, image)

    def test_label_co_transforms(self):
        image = torch.arange(16, dtype=torch.float32).reshape(1, 4, 4)
        label = torch.arange(16, dtype=torch.int64).reshape(4, 4)
        params = WeakAugParams(flip_h=True, flip_v=True, quarter_turns=1)
        out_img, out_lab = weak_aug(image, label, params=params)
        # Pixel at image value v must carry label v after any geometry.
        assert torch.equal(out_img[0].to(torch.int64), out_lab)

    def test_four_rotations_restore(self):
        image = torch.rand(1, 6, 6)
        out = image
        params = WeakAugParams(flip_h=False, flip_v=False, quarter_turns=1)
        for _ in range(4):
            out, _ = weak_aug(out, params=params)
        assert torch.equal(out, image)

    def test_pixel_jitter_stays_in_range(self, rng):
        image = torch.rand(1, 16, 16)
        for _ in range(20):
            out = strong_aug_pixel(image, rng=rng)
            assert float(out.min()) >= 0.0
            assert float(out.max()) <= 1.0

    def test_pixel_param_ranges(self, rng):
        for _ in range(50):
            params = draw_pixel_params(rng, (1, 4, 4))
            assert -0.2 <= params.brightness <= 0.2
            assert -0.2 <= params.contrast <= 0.2


class TestSelfTraining:
    def test_no_unlabeled_no_strategy_is_supervised(self, batch):
        cfg = ParadigmConfig(strategy="none")
        model = build_model(3, seed=0)
        opt = make_optimizer(model)
        ra, rm = fresh_rngs()
        log = train_step_st(model, opt,
                            Batch(labeled=batch.labeled, unlabeled=[]),
                            cfg, 0, AgeSchedule(10), ra, rm)
        assert log.loss_unsup == 0.0
        assert log.loss_total == log.loss_sup
        assert log.mix_states == ()

    def test_steplog_records_every_adamix_invocation(self, batch):
        cfg = ParadigmConfig(strategy="adamix", patch_size=8, max_patches=16)
        model = build_model(3, seed=0)
        opt = make_optimizer(model)
        ra, rm = fresh_rngs()
        log = train_step_st(model, opt, batch, cfg, 3, AgeSchedule(10), ra,
                            rm)
        # One solver state per sample: 2 labeled + 2 unlabeled.
        assert len(log.mix_states) == 4
        assert log.lam == pytest.approx(math.exp(-5.0 * (1 - 0.3) ** 2))
        for state in log.mix_states:
            assert state.lam == log.lam

    def test_csv_row_matches_column_schema(self, batch):
        cfg = ParadigmConfig(strategy="adamix", patch_size=8, max_patches=16)
        model = build_model(3, seed=0)
        opt = make_optimizer(model)
        ra, rm = fresh_rngs()
        log = train_step_st(model, opt, batch, cfg, 0, AgeSchedule(10), ra,
                            rm)
        row = log.csv_row()
        assert len(row) == len(STEPLOG_COLUMNS)
        # Every float cell parses back to the exact logged value.
        assert float(row[1]) == log.lam
        assert float(row[6]) == log.loss_sup
        assert float(row[7]) == log.loss_unsup
        assert float(row[8]) == log.loss_total

    def test_loss_decomposition_recomputable(self, batch):
        cfg = ParadigmConfig(strategy="adamix", patch_size=8, max_patches=16,
                             unsup_weight=1.0)
        model = build_model(3, seed=0)
        opt = make_optimizer(model)
        ra, rm = fresh_rngs()
        for t in range(3):
            log = train_step_st(model, opt, batch, cfg, t, AgeSchedule(10),
                                ra, rm)
            row = log.csv_row()
            recomputed = float(row[6]) + cfg.unsup_weight * float(row[7])
            assert float(row[8]) == recomputed

    def test_overfits_one_batch_combined(self, data32):
        # Unlabeled views of the two fitted images keep the pseudo-label
        # target attainable; 200 steps at the reference rate (1e-3) push the
        # combined objective under 0.2.
        img2, lab2 = sample(data32, "s0002")
        img4, lab4 = sample(data32, "s0004")
        batch = Batch(labeled=[(img2, lab2), (img4, lab4)],
                      unlabeled=[img2.clone(), img4.clone()])
        cfg = ParadigmConfig(strategy="none")
        model = build_model(3, seed=0)
        opt = make_optimizer(model, learning_rate=1e-3)
        sched = AgeSchedule(max_iteration=200)
        ra, rm = fresh_rngs()
        log = None
        for t in range(200):
            log = train_step_st(model, opt, batch, cfg, t, sched, ra, rm)
        assert log.loss_total < 0.2

    def test_pseudo_labeling_does_not_move_parameters(self, batch):
        cfg = ParadigmConfig(strategy="adamix", patch_size=8, max_patches=16)
        model = build_model(3, seed=0)
        frozen = copy.deepcopy(model)
        opt = make_optimizer(model, learning_rate=0.0, weight_decay=0.0)
        ra, rm = fresh_rngs()
        train_step_st(model, opt, batch, cfg, 0, AgeSchedule(10), ra, rm)
        # Zero learning rate isolates non-gradient parameter movement.
        assert params_equal(model, frozen)

    def test_below_threshold_pixels_carry_no_gradient(self, data32):
        # Perturbing pseudo labels only at below-tau pixels must leave the
        # unsupervised loss unchanged.
        from adamix.confidence import pseudo_label, softmax_probs
        from adamix.losses import unsup_loss

        model = build_model(3, seed=0)
        image = torch.from_numpy(data32.image("s0006"))
        with torch.no_grad():
            logits = model(image)
        pseudo, conf = pseudo_label(softmax_probs(logits))
        tau = 0.95
        below = conf < tau
        assert bool(below.any()) and bool((~below).any())
        perturbed = pseudo.clone()
        perturbed[below] = (perturbed[below] + 1) % 3
        train_logits = model(image)
        a = float(unsup_loss(train_logits, pseudo, conf, tau).detach())
        b = float(unsup_loss(train_logits, perturbed, conf, tau).detach())
        assert a == b


class TestMeanTeacher:
    def test_alpha_zero_teacher_tracks_student(self, batch):
        cfg = ParadigmConfig(paradigm="mean_teacher", strategy="adamix",
                             patch_size=8, max_patches=16, ema_alpha=0.0)
        student = build_model(3, seed=0)
        teacher = copy.deepcopy(student)
        for p in teacher.parameters():
            p.requires_grad_(False)
        opt = make_optimizer(student)
        ra, rm = fresh_rngs()
        for t in range(2):
            train_step_mt(student, teacher, opt, batch, cfg, t,
                          AgeSchedule(10), ra, rm)
            assert params_equal(student, teacher)

    def test_teacher_receives_no_gradients(self, batch):
        cfg = ParadigmConfig(paradigm="mean_teacher", strategy="adamix",
                             patch_size=8, max_patches=16)
        student = build_model(3, seed=0)
        teacher = copy.deepcopy(student)
        for p in teacher.parameters():
            p.requires_grad_(False)
        opt = make_optimizer(student)
        ra, rm = fresh_rngs()
        train_step_mt(student, teacher, opt, batch, cfg, 0, AgeSchedule(10),
                      ra, rm)
        assert all(p.grad is None for p in teacher.parameters())

    def test_alpha_zero_matches_self_training_trajectory(self, batch):
        cfg_mt = ParadigmConfig(paradigm="mean_teacher", strategy="adamix",
                                patch_size=8, max_patches=16, ema_alpha=0.0)
        cfg_st = ParadigmConfig(paradigm="self_training", strategy="adamix",
                                patch_size=8, max_patches=16)
        student = build_model(3, seed=0)
        teacher = copy.deepcopy(student)
        for p in teacher.parameters():
            p.requires_grad_(False)
        st_model = build_model(3, seed=0)
        opt_mt = make_optimizer(student)
        opt_st = make_optimizer(st_model)
        ra1, rm1 = fresh_rngs()
        ra2, rm2 = fresh_rngs()
        for t in range(3):
            log_mt = train_step_mt(student, teacher, opt_mt, batch, cfg_mt,
                                   t, AgeSchedule(10), ra1, rm1)
            log_st = train_step_st(st_model, opt_st, batch, cfg_st, t,
                                   AgeSchedule(10), ra2, rm2)
            assert params_equal(student, st_model)
            assert log_mt.loss_total == log_st.loss_total

    def test_ema_mixes_frozen_teacher(self, batch):
        cfg = ParadigmConfig(paradigm="mean_teacher", strategy="none",
                             ema_alpha=1.0)
        student = build_model(3, seed=0)
        teacher = copy.deepcopy(student)
        for p in teacher.parameters():
            p.requires_grad_(False)
        frozen = copy.deepcopy(teacher)
        opt = make_optimizer(student)
        ra, rm = fresh_rngs()
        train_step_mt(student, teacher, opt, batch, cfg, 0, AgeSchedule(10),
                      ra, rm)
        # alpha = 1: the teacher never moves even though the student does.
        assert params_equal(teacher, frozen)
        assert not params_equal(student, frozen)


class TestCoTraining:
    def test_identical_inits_stay_identical(self, batch):
        cfg = ParadigmConfig(paradigm="co_training", strategy="adamix",
                             patch_size=8, max_patches=16)
        m1 = build_model(3, seed=0)
        m2 = build_model(3, seed=0)
        o1, o2 = make_optimizer(m1), make_optimizer(m2)
        ra, rm = fresh_rngs()
        for t in range(2):
            train_step_ct(m1, m2, o1, o2, batch, cfg, t, AgeSchedule(10), ra,
                          rm)
            assert params_equal(m1, m2)

    def test_different_seeds_diverge_after_one_step(self, batch):
        cfg = ParadigmConfig(paradigm="co_training", strategy="adamix",
                             patch_size=8, max_patches=16)
        m1 = build_model(3, seed=0)
        m2 = build_model(3, seed=1)
        o1, o2 = make_optimizer(m1), make_optimizer(m2)
        ra, rm = fresh_rngs()
        train_step_ct(m1, m2, o1, o2, batch, cfg, 0, AgeSchedule(10), ra, rm)
        assert param_distance(m1, m2) > 0.0

    def test_without_cross_supervision_matches_supervised(self, batch):
        # No unlabeled data and no mixing: each co-trained model follows the
        # plain supervised trajectory its own seed would produce.
        labeled_only = Batch(labeled=batch.labeled, unlabeled=[])
        cfg_ct = ParadigmConfig(paradigm="co_training", strategy="none")
        cfg_st = ParadigmConfig(paradigm="self_training", strategy="none")
        m1 = build_model(3, seed=0)
        m2 = build_model(3, seed=1)
        o1, o2 = make_optimizer(m1), make_optimizer(m2)
        ref1 = build_model(3, seed=0)
        ref2 = build_model(3, seed=1)
        r1 = make_optimizer(ref1)
        r2 = make_optimizer(ref2)
        ra, rm = fresh_rngs()
        ra1, rm1 = fresh_rngs()
        ra2, rm2 = fresh_rngs()
        for t in range(3):
            train_step_ct(m1, m2, o1, o2, labeled_only, cfg_ct, t,
                          AgeSchedule(10), ra, rm)
            train_step_st(ref1, r1, labeled_only, cfg_st, t, AgeSchedule(10),
                          ra1, rm1)
            train_step_st(ref2, r2, labeled_only, cfg_st, t, AgeSchedule(10),
                          ra2, rm2)
            assert params_equal(m1, ref1)
            assert params_equal(m2, ref2)

    def test_log_aggregates_both_branches(self, batch):
        cfg = ParadigmConfig(paradigm="co_training", strategy="adamix",
                             patch_size=8, max_patches=16)
        m1 = build_model(3, seed=0)
        m2 = build_model(3, seed=1)
        o1, o2 = make_optimizer(m1), make_optimizer(m2)
        ra, rm = fresh_rngs()
        log = train_step_ct(m1, m2, o1, o2, batch, cfg, 0, AgeSchedule(10),
                            ra, rm)
        # 4 samples per branch, two branches.
        assert len(log.mix_states) == 8


class TestParadigmEquivalence:
    def test_all_paradigms_match_supervised_when_degenerate(self, batch):
        # strategy = none, zero unlabeled data, same seed: identical
        # parameter trajectories across ST, MT, and CT.
        labeled_only = Batch(labeled=batch.labeled, unlabeled=[])
        models = {}

        st = build_model(3, seed=0)
        opt = make_optimizer(st)
        ra, rm = fresh_rngs()
        for t in range(2):
            train_step_st(st, opt, labeled_only,
                          ParadigmConfig(strategy="none"), t, AgeSchedule(10),
                          ra, rm)
        models["st"] = st

        student = build_model(3, seed=0)
        teacher = copy.deepcopy(student)
        for p in teacher.parameters():
            p.requires_grad_(False)
        opt = make_optimizer(student)
        ra, rm = fresh_rngs()
        for t in range(2):
            train_step_mt(student, teacher, opt, labeled_only,
                          ParadigmConfig(paradigm="mean_teacher",
                                         strategy="none"), t, AgeSchedule(10),
                          ra, rm)
        models["mt"] = student

        m1 = build_model(3, seed=0)
        m2 = build_model(3, seed=0)
        o1, o2 = make_optimizer(m1), make_optimizer(m2)
        ra, rm = fresh_rngs()
        for t in range(2):
            train_step_ct(m1, m2, o1, o2, labeled_only,
                          ParadigmConfig(paradigm="co_training",
                                         strategy="none"), t, AgeSchedule(10),
                          ra, rm)
        models["ct"] = m1

        assert params_equal(models["st"], models["mt"])
        assert params_equal(models["st"], models["ct"])
