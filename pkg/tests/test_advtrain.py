import json

import numpy as np
import pytest

import raprec.advtrain as adv

from raprec import nnkernel as nn
from raprec.advtrain import (NonFiniteLossError, TrainConfig, _sequence_batch,
                             attacker_update, build_item_lists, fit, init_state,
                             recommender_objective, recommender_update, train_recommender)
from raprec.attacker import attacker_forward, attacker_loss
from raprec.dataio import AttributeTable, RatingDataset
from raprec.recommender import bpr_data_loss, l2_penalty, sample_triplets


def toy_world(N=12, M=15, seed=0, per_user=5):
    rng = np.random.default_rng(seed)
    u, i = [], []
    gender = np.arange(N) % 2
    for h in range(N):
        # odd users always rate item 0, which makes gender learnable
        pool = np.arange(1, M)
        items = rng.choice(pool, size=per_user - gender[h], replace=False)
        if gender[h]:
            items = np.concatenate([[0], items])
        u += [h] * len(items)
        i += items.tolist()
    n = len(u)
    ds = RatingDataset(np.array(u), np.array(i), rng.integers(1, 6, n), rng.integers(0, 1000, n), N, M)
    attrs = AttributeTable(gender, np.arange(N) % 3, np.arange(N) % 21)
    return ds, attrs


def small_cfg(**kw):
    base = dict(dim=4, rec_hidden=3, att_hidden=5, K=3, epochs=2, batch_size=4,
                rec_init_scale=0.5, att_init_scale=0.3, lr=0.01)
    base.update(kw)
    return TrainConfig(**base)


def batch_inputs(state, cfg, ds, attrs, users, seed=0):
    trip = sample_triplets(ds, users, 1, np.random.default_rng(seed))
    seq = _sequence_batch(build_item_lists(state, users, cfg.K, ds), attrs, cfg.attributes,
                          cfg.max_seq_len)
    return trip, seq


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.alpha, cfg.lam, cfg.batch_size, cfg.epochs, cfg.dim) == (1.0, 0.01, 32, 20, 70)

    def test_negative_alpha(self):
        with pytest.raises(ValueError):
            TrainConfig(alpha=-0.1)

    def test_bad_mask(self):
        with pytest.raises(ValueError):
            TrainConfig(attributes=("zip",))


class TestItemLists:
    def test_k_zero(self):
        ds, attrs = toy_world()
        cfg = small_cfg()
        state = init_state(cfg, ds.num_users, ds.num_items)
        lists = build_item_lists(state, [0, 1], 0, ds)
        assert lists[1].items.tolist() == ds.rated(1).tolist()

    def test_sizes_when_disjoint(self):
        ds, attrs = toy_world()
        state = init_state(small_cfg(), ds.num_users, ds.num_items)
        lists = build_item_lists(state, range(ds.num_users), 4, ds)
        for u, s in lists.items():
            assert len(s) == len(ds.rated(u)) + 4 and len(set(s.items.tolist())) == len(s)

    def test_uniform_model_is_deterministic(self):
        ds, attrs = toy_world()
        state = init_state(small_cfg(), ds.num_users, ds.num_items)
        for name in state.rec.names():
            state.rec[name].data[...] = 0.0
        lists = build_item_lists(state, [0], 3, ds)
        free = [j for j in range(ds.num_items) if j not in ds.rated_set(0)]
        assert lists[0].items[-3:].tolist() == free[:3]


class TestUpdates:
    def test_joint_gradient_splits(self):
        ds, attrs = toy_world()
        cfg = small_cfg(alpha=0.7)
        state = init_state(cfg, ds.num_users, ds.num_items)
        trip, seq = batch_inputs(state, cfg, ds, attrs, np.arange(6))

        state.rec.zero_grad()
        obj, _, _ = recommender_objective(state, trip, seq, cfg)
        obj.backward()
        joint = {n: t.grad.copy() for n, t in state.rec.items()}

        state.rec.zero_grad()
        nn.backward(nn.add(bpr_data_loss(state.rec, trip), nn.mul(l2_penalty(state.rec), cfg.lam)))
        g_rank = {n: t.grad.copy() for n, t in state.rec.items()}
        state.rec.zero_grad()
        with state.att.frozen():
            nn.backward(attacker_loss(state.att, state.rec, seq.users, seq.idx, seq.mask, seq.labels))
        g_att = {n: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                 for n, t in state.rec.items()}
        for n in joint:
            np.testing.assert_allclose(joint[n], g_rank[n] - cfg.alpha * g_att[n], atol=1e-10, rtol=0)

    def test_recommender_update_isolates_attacker(self):
        ds, attrs = toy_world()
        cfg = small_cfg()
        state = init_state(cfg, ds.num_users, ds.num_items)
        trip, seq = batch_inputs(state, cfg, ds, attrs, np.arange(6))
        att_before, rec_before = state.att.checksum(), state.rec.checksum()
        recommender_update(state, trip, seq, cfg)
        assert state.att.checksum() == att_before and state.rec.checksum() != rec_before

    def test_attacker_update_isolates_recommender(self):
        ds, attrs = toy_world()
        cfg = small_cfg()
        state = init_state(cfg, ds.num_users, ds.num_items)
        _, seq = batch_inputs(state, cfg, ds, attrs, np.arange(6))
        rec_before, att_before = state.rec.checksum(), state.att.checksum()
        attacker_update(state, seq, cfg)
        assert state.rec.checksum() == rec_before and state.att.checksum() != att_before

    def test_attribute_mask_leaves_other_heads(self):
        ds, attrs = toy_world()
        cfg = small_cfg(attributes=("age",))
        state = init_state(cfg, ds.num_users, ds.num_items)
        # a full attacker so that untouched heads actually exist
        full = init_state(small_cfg(), ds.num_users, ds.num_items).att
        state.att = full
        before = full.copy()
        _, seq = batch_inputs(state, cfg, ds, attrs, np.arange(6))
        attacker_update(state, seq, cfg)
        for n in state.att.names():
            same = np.array_equal(state.att[n].data, before[n].data)
            assert same == (not n.startswith("att.age."))

    def test_single_attribute_objective_uses_t_one(self):
        ds, attrs = toy_world()
        cfg = small_cfg(attributes=("gender",), lam=0.0, alpha=1.0)
        state = init_state(cfg, ds.num_users, ds.num_items)
        trip, seq = batch_inputs(state, cfg, ds, attrs, np.arange(6))
        _, _, att = recommender_objective(state, trip, seq, cfg)
        p = attacker_forward(state.att, state.rec, seq.users, seq.idx, seq.mask, ["gender"])["gender"].data
        expect = -np.mean(np.log(p[np.arange(len(seq)), seq.labels["gender"]]))
        assert att.item() == pytest.approx(expect, abs=1e-13)

    def test_decay_only_shrinks(self):
        ds, attrs = toy_world()
        state = init_state(small_cfg(), ds.num_users, ds.num_items)
        ps = state.rec
        norm = lambda: sum(float((a ** 2).sum()) for a in ps.arrays().values())
        before = norm()
        ps.zero_grad()
        nn.backward(nn.mul(l2_penalty(ps), 0.01))
        nn.sgd_step(ps, 0.1, ps.names())
        assert norm() < before

    def test_non_finite_aborts(self):
        ds, attrs = toy_world()
        cfg = small_cfg()
        state = init_state(cfg, ds.num_users, ds.num_items)
        trip, seq = batch_inputs(state, cfg, ds, attrs, np.arange(6))
        state.rec["rec.out.b"].data[...] = np.nan
        with pytest.raises(NonFiniteLossError, match="parameter norms"):
            recommender_update(state, trip, seq, cfg)


class TestFit:
    def test_zero_epochs(self):
        ds, attrs = toy_world()
        cfg = small_cfg(epochs=0)
        state = fit(cfg, ds, attrs)
        assert state.history == [] and state.step == 0
        assert state.rec.checksum() == init_state(cfg, ds.num_users, ds.num_items).rec.checksum()

    def test_empty_train(self):
        empty = RatingDataset(np.empty(0, int), np.empty(0, int), np.empty(0, int), np.empty(0, int), 0, 0)
        with pytest.raises(ValueError):
            fit(small_cfg(), empty, AttributeTable(np.empty(0, int), np.empty(0, int), np.empty(0, int)))

    def test_alpha_zero_matches_ranking_only(self):
        ds, attrs = toy_world(N=20)
        cfg = small_cfg(alpha=0.0, epochs=3)
        a_trace, b_trace = [], []
        fit(cfg, ds, attrs, callback=lambda s: a_trace.append(s.rec.checksum()))
        train_recommender(cfg, ds, callback=lambda s: b_trace.append(s.rec.checksum()))
        assert a_trace == b_trace and len(a_trace) == 15

    def test_histories_finite_and_progress(self):
        ds, attrs = toy_world(N=16)
        state = fit(small_cfg(epochs=20, alpha=0.5), ds, attrs)
        assert len(state.history) == 20
        assert all(np.isfinite(e["rec_loss"]) and np.isfinite(e["att_loss"]) for e in state.history)
        assert state.history[-1]["rec_loss"] < state.history[0]["rec_loss"]

    def test_train_users_restrict_labels(self):
        ds, attrs = toy_world()
        seen = []
        orig = adv._sequence_batch

        def spy(seqs, a, attributes, max_len):
            seen.extend(seqs)
            return orig(seqs, a, attributes, max_len)

        adv._sequence_batch = spy
        try:
            fit(small_cfg(epochs=1), ds, attrs, train_users=[0, 1, 2])
        finally:
            adv._sequence_batch = orig
        assert set(seen) <= {0, 1, 2} and seen

    def test_log_written(self, tmp_path):
        ds, attrs = toy_world()
        cfg = small_cfg(epochs=1)
        state = fit(cfg, ds, attrs)
        state.write_log(tmp_path / "log.json", cfg)
        doc = json.loads((tmp_path / "log.json").read_text())
        assert doc["seed"] == 0 and len(doc["epochs"]) == 1


def test_attacker_updates_converge_on_separable_toy():
    ds, attrs = toy_world(N=16)
    cfg = small_cfg(attributes=("gender",), att_hidden=8, lam=0.0, K=0)
    state = init_state(cfg, ds.num_users, ds.num_items)
    users = np.arange(ds.num_users)
    seq = _sequence_batch(build_item_lists(state, users, 0, ds), attrs, cfg.attributes, 200)
    for _ in range(400):
        loss = attacker_update(state, seq, cfg)
    assert loss < 0.1


def test_gradient_reversal_term_ascends_attacker_loss():
    """A tiny step along the reversal term alone never lowers the attacker loss."""
    ds, attrs = toy_world(N=40, M=20, per_user=6)
    cfg = small_cfg(alpha=1.0, batch_size=8)
    state = init_state(cfg, ds.num_users, ds.num_items)
    rng = np.random.default_rng(0)
    for _ in range(100):
        users = rng.choice(ds.num_users, size=8, replace=False)
        _, seq = batch_inputs(state, cfg, ds, attrs, users)
        rec = state.rec.copy()
        loss = lambda: attacker_loss(state.att, rec, seq.users, seq.idx, seq.mask, seq.labels)
        rec.zero_grad()
        before = loss()
        nn.backward(before)
        # descent on -alpha * L_P is ascent on L_P
        for name, t in rec.items():
            if t.grad is not None:
                t.data += 1e-6 * cfg.alpha * t.grad
        assert loss().item() >= before.item()
