"""Tests for the momentum-contrast learner."""

import collections
import json
import logging
import math
from decimal import Decimal, getcontext

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from core.config import LearnerConfig
from core.learner import (
    CheckpointError,
    EmbeddingQueue,
    NonFiniteError,
    SecoState,
    ViewEmbeddings,
    build_state,
    count_parameters,
    evaluate_batch,
    forward_views,
    info_nce,
    info_nce_batch,
    load_checkpoint,
    load_encoder,
    lr_at,
    make_batch,
    make_optimizer,
    momentum_update,
    parameter_checksum,
    pretrain,
    queue_push,
    random_encoder,
    read_checkpoint,
    save_checkpoint,
    seco_loss,
    subspace_similarity,
    train_step,
)
from core.networks import Encoder, ProjectionHead, norm_groups


def _unit(*shape, generator=None, dtype=torch.float64):
    return F.normalize(torch.randn(*shape, generator=generator, dtype=dtype), dim=-1)


def _decimal_info_nce(q, k_pos, negatives, tau):
    """-log softmax of the positive, evaluated with 40 significant digits."""
    getcontext().prec = 40
    t = Decimal(repr(tau))
    pos = (Decimal(repr(float(q @ k_pos))) / t).exp()
    denom = pos + sum(((Decimal(repr(float(q @ n))) / t).exp() for n in negatives), Decimal(0))
    return float(-(pos / denom).ln())


def _naive_loss(q, k_pos, negatives, tau):
    logits = [float(q @ k_pos) / tau] + [float(q @ n) / tau for n in negatives]
    top = max(logits)
    return -(logits[0] - top - math.log(math.fsum(math.exp(v - top) for v in logits)))


def _random_embeddings(batch, dim, generator):
    return ViewEmbeddings(
        q=tuple(_unit(batch, dim, generator=generator) for _ in range(3)),
        k0=tuple(_unit(batch, dim, generator=generator) for _ in range(3)),
        k1=tuple(_unit(batch, dim, generator=generator) for _ in range(3)),
        k2=tuple(_unit(batch, dim, generator=generator) for _ in range(3)),
    )


def _random_batch(batch=2, size=16, seed=0, method='seco'):
    g = torch.Generator().manual_seed(seed)
    names = ('x_q', 'x_k0', 'x_k1', 'x_k2') if method == 'seco' else ('x_q', 'x_k')
    return {name: torch.rand(batch, 3, size, size, generator=g) for name in names}


class TestInfoNCE:
    """Test the single-query InfoNCE."""

    def test_empty_negatives_is_exactly_zero(self):
        q = _unit(8)
        assert info_nce(q, q, [], 0.07).item() == 0.0
        assert info_nce(q, _unit(8), torch.empty(0, 8, dtype=torch.float64), 0.07).item() == 0.0

    def test_symmetric_logits_give_ln2(self):
        q = torch.tensor([1.0, 0.0], dtype=torch.float64)
        k = torch.tensor([0.0, 1.0], dtype=torch.float64)
        assert info_nce(q, k, [torch.tensor([0.0, -1.0], dtype=torch.float64)], 1.0).item() == pytest.approx(
            math.log(2.0), abs=1e-12
        )

    def test_matches_extended_precision_oracle(self):
        g = torch.Generator().manual_seed(0)
        rng = np.random.default_rng(0)
        for _ in range(1000):
            dim = int(rng.integers(2, 17))
            n_neg = int(rng.integers(1, 65))
            tau = float(rng.choice([0.07, 0.5, 1.0]))
            q, k = _unit(dim, generator=g), _unit(dim, generator=g)
            negatives = _unit(n_neg, dim, generator=g)
            got = info_nce(q, k, negatives, tau).item()
            assert got == pytest.approx(_decimal_info_nce(q, k, negatives, tau), rel=1e-6, abs=1e-12)

    def test_list_and_tensor_negatives_agree(self):
        g = torch.Generator().manual_seed(1)
        q, k, n = _unit(4, generator=g), _unit(4, generator=g), _unit(5, 4, generator=g)
        assert info_nce(q, k, list(n), 0.5).item() == info_nce(q, k, n, 0.5).item()

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match='dimension'):
            info_nce(_unit(4), _unit(4), _unit(3, 5), 0.1)
        with pytest.raises(ValueError):
            info_nce(_unit(4), _unit(5), _unit(3, 4), 0.1)

    def test_temperature_must_be_positive(self):
        with pytest.raises(ValueError, match='temperature'):
            info_nce(_unit(4), _unit(4), _unit(3, 4), 0.0)

    def test_non_negative(self):
        g = torch.Generator().manual_seed(2)
        for _ in range(200):
            assert info_nce(_unit(6, generator=g), _unit(6, generator=g), _unit(7, 6, generator=g), 0.07).item() >= 0.0

    def test_decreasing_in_positive_logit(self):
        q = torch.tensor([1.0, 0.0], dtype=torch.float64)
        negatives = torch.tensor([[math.cos(2.0), math.sin(2.0)], [math.cos(2.5), math.sin(2.5)]], dtype=torch.float64)
        losses = [
            info_nce(q, torch.tensor([math.cos(a), math.sin(a)], dtype=torch.float64), negatives, 0.07).item()
            for a in np.linspace(1.5, 0.0, 7)
        ]
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_batch_matches_single(self):
        g = torch.Generator().manual_seed(3)
        q, k, queue = _unit(4, 8, generator=g), _unit(4, 8, generator=g), _unit(10, 8, generator=g)
        hard = _unit(4, 2, 8, generator=g)
        batch = info_nce_batch(q, k, queue, 0.2, hard)
        for i in range(4):
            single = info_nce(q[i], k[i], torch.cat([queue, hard[i]]), 0.2)
            assert batch[i].item() == pytest.approx(single.item(), rel=1e-12)


class TestSecoLoss:
    """Test the three sub-space objective."""

    def test_matches_naive_enumeration(self):
        g = torch.Generator().manual_seed(4)
        rng = np.random.default_rng(4)
        for _ in range(50):
            batch, dim, tau = int(rng.integers(1, 9)), 8, float(rng.choice([0.07, 0.2, 1.0]))
            emb = _random_embeddings(batch, dim, g)
            queues = [_unit(int(rng.integers(0, 65)), dim, generator=g) for _ in range(3)]
            total, l0, l1, l2 = seco_loss(emb, queues, tau)
            expected = [0.0, 0.0, 0.0]
            for b in range(batch):
                expected[0] += _naive_loss(emb.q[0][b], emb.k0[0][b], list(queues[0]), tau)
                expected[1] += _naive_loss(emb.q[1][b], emb.k1[1][b], list(queues[1]) + [emb.k0[1][b], emb.k2[1][b]], tau)
                expected[2] += _naive_loss(emb.q[2][b], emb.k2[2][b], list(queues[2]) + [emb.k0[2][b], emb.k1[2][b]], tau)
            expected = [e / batch for e in expected]
            for got, want in zip((l0, l1, l2), expected):
                assert got.item() == pytest.approx(want, rel=1e-6, abs=1e-12)
            assert total.item() == pytest.approx(sum(expected), rel=1e-6)

    def test_empty_queues_leave_two_hard_negatives(self):
        g = torch.Generator().manual_seed(5)
        emb = _random_embeddings(1, 8, g)
        empty = [torch.empty(0, 8, dtype=torch.float64)] * 3
        _, l0, l1, l2 = seco_loss(emb, empty, 0.07)
        assert l0.item() == 0.0
        assert l1.item() == pytest.approx(info_nce(emb.q[1][0], emb.k1[1][0], [emb.k0[1][0], emb.k2[1][0]], 0.07).item())
        assert l2.item() == pytest.approx(info_nce(emb.q[2][0], emb.k2[2][0], [emb.k0[2][0], emb.k1[2][0]], 0.07).item())

    def test_equal_embeddings(self):
        e = F.normalize(torch.ones(1, 8, dtype=torch.float64), dim=1)
        same = tuple(e.clone() for _ in range(3))
        emb = ViewEmbeddings(q=same, k0=same, k1=same, k2=same)
        sizes = (5, 7, 11)
        queues = [e.repeat(n, 1) for n in sizes]
        _, l0, l1, l2 = seco_loss(emb, queues, 0.07)
        assert l0.item() == pytest.approx(math.log(1 + sizes[0]), rel=1e-9)
        assert l1.item() == pytest.approx(math.log(3 + sizes[1]), rel=1e-9)
        assert l2.item() == pytest.approx(math.log(3 + sizes[2]), rel=1e-9)

    def test_multi_positive_z0_averages_the_keys(self):
        g = torch.Generator().manual_seed(6)
        emb = _random_embeddings(3, 8, g)
        queues = [_unit(6, 8, generator=g) for _ in range(3)]
        _, l0, _, _ = seco_loss(emb, queues, 0.1, multi_positive_z0=True)
        parts = [info_nce_batch(emb.q[0], k[0], queues[0], 0.1).mean().item() for k in (emb.k0, emb.k1, emb.k2)]
        assert l0.item() == pytest.approx(np.mean(parts), rel=1e-9)

    def test_pair_embeddings_only_have_l0(self):
        g = torch.Generator().manual_seed(7)
        emb = ViewEmbeddings(q=(_unit(2, 8, generator=g),), k0=(_unit(2, 8, generator=g),))
        total, l0, l1, l2 = seco_loss(emb, [_unit(4, 8, generator=g)], 0.1)
        assert l1.item() == 0.0 and l2.item() == 0.0
        assert total.item() == l0.item() > 0.0


class TestEmbeddingQueue:
    """Test FIFO semantics of the negative queue."""

    def test_starts_empty(self):
        queue = EmbeddingQueue(4, 3)
        assert len(queue) == 0
        assert queue.contents().shape == (0, 3)

    def test_fifo_one_at_a_time(self):
        queue = EmbeddingQueue(4, 2)
        pushes = [F.normalize(torch.tensor([[1.0, float(i)]]), dim=1) for i in range(1, 7)]
        for p in pushes:
            queue_push(queue, p)
        assert torch.equal(queue.contents(), torch.cat(pushes[2:]))

    def test_full_queue_evicts_oldest_batch(self):
        queue = EmbeddingQueue(5, 2)
        first = _unit(5, 2, dtype=torch.float32)
        second = _unit(3, 2, dtype=torch.float32)
        queue.push(first)
        queue.push(second)
        assert len(queue) == 5
        assert torch.equal(queue.contents(), torch.cat([first[3:], second]))

    def test_oversized_batch_keeps_newest(self):
        queue = EmbeddingQueue(3, 2)
        keys = _unit(7, 2, dtype=torch.float32)
        queue.push(keys)
        assert torch.equal(queue.contents(), keys[-3:])

    def test_randomised_against_deque(self):
        rng = np.random.default_rng(0)
        g = torch.Generator().manual_seed(0)
        queue = EmbeddingQueue(7, 3)
        model: collections.deque = collections.deque(maxlen=7)
        for _ in range(10_000):
            keys = _unit(int(rng.integers(0, 10)), 3, generator=g, dtype=torch.float32)
            queue.push(keys)
            model.extend(keys)
            contents = queue.contents()
            assert len(queue) == len(model) <= 7
            if len(model):
                assert torch.equal(contents, torch.stack(list(model)))
                assert torch.all((contents.norm(dim=1) - 1.0).abs() <= 1e-5)

    def test_non_unit_keys_are_renormalised(self, caplog):
        queue = EmbeddingQueue(4, 2)
        with caplog.at_level(logging.WARNING, logger='core.learner'):
            queue.push(torch.tensor([[3.0, 4.0]]))
        assert torch.allclose(queue.contents(), torch.tensor([[0.6, 0.8]]))
        assert 'Renormalising' in caplog.text

    def test_shape_checked(self):
        with pytest.raises(ValueError):
            EmbeddingQueue(4, 2).push(torch.zeros(2, 3))


class TestNetworks:
    """Test the encoder and heads."""

    def test_norm_groups_divides(self):
        for c in (1, 3, 4, 6, 8, 12, 16, 20, 128):
            g = norm_groups(c)
            assert c % g == 0 and g <= 8

    def test_encoder_stages(self):
        encoder = Encoder((4, 8, 16))
        maps = encoder.forward_stages(torch.rand(2, 3, 32, 32), include_stem=True)
        assert [tuple(m.shape[1:]) for m in maps] == [(4, 32, 32), (4, 16, 16), (8, 8, 8), (16, 4, 4)]
        assert encoder(torch.rand(2, 3, 32, 32)).shape == (2, 16)

    def test_head_output_is_unit(self):
        head = ProjectionHead(16, 8)
        z = head(torch.randn(5, 16))
        assert torch.allclose(z.norm(dim=1), torch.ones(5), atol=1e-5)

    def test_micro_model_is_small(self, tiny_learner_config):
        assert count_parameters(SecoState(tiny_learner_config).encoder) < 5000


class TestForwardViews:
    """Test the online/momentum embedding paths."""

    def test_twelve_unit_embeddings(self, tiny_learner_config):
        state = build_state(tiny_learner_config)
        emb = forward_views(state, _random_batch(batch=1))
        tensors = [t for group in emb for t in group]
        assert len(tensors) == 12
        for t in tensors:
            assert t.shape == (1, 8)
            assert torch.allclose(t.norm(dim=1), torch.ones(1), atol=1e-5)

    def test_identical_queries_identical_rows(self, tiny_learner_config):
        state = build_state(tiny_learner_config)
        batch = _random_batch(batch=2)
        batch['x_q'][1] = batch['x_q'][0]
        emb = forward_views(state, batch)
        for z in emb.q:
            assert torch.allclose(z[0], z[1], atol=1e-6)

    def test_fresh_momentum_copy_matches_online(self, tiny_learner_config):
        state = build_state(tiny_learner_config)
        batch = _random_batch(batch=2)
        batch['x_k0'] = batch['x_q'].clone()
        emb = forward_views(state, batch)
        for q, k in zip(emb.q, emb.k0):
            assert torch.allclose(q, k, atol=1e-6)

    def test_keys_carry_no_gradient(self, tiny_learner_config):
        emb = forward_views(build_state(tiny_learner_config), _random_batch())
        assert all(z.requires_grad for z in emb.q)
        assert not any(z.requires_grad for group in (emb.k0, emb.k1, emb.k2) for z in group)

    def test_non_finite_input_aborts(self, tiny_learner_config):
        batch = _random_batch()
        batch['x_q'][0, 0, 0, 0] = float('nan')
        with pytest.raises(NonFiniteError) as info:
            forward_views(build_state(tiny_learner_config), batch)
        assert info.value.diagnostics['where'] == 'online encoder'

    def test_empty_batch(self, tiny_learner_config):
        with pytest.raises(ValueError):
            forward_views(build_state(tiny_learner_config), _random_batch(batch=0))


class TestGradients:
    """Test analytic gradients against central finite differences."""

    def test_total_loss_gradient(self, tiny_learner_config):
        state = build_state(tiny_learner_config).double()
        state.train()
        batch = {k: v.double() for k, v in _random_batch(batch=2, size=8, seed=3).items()}
        queues = [_unit(5, 8, generator=torch.Generator().manual_seed(i)) for i in range(3)]

        def loss() -> torch.Tensor:
            return seco_loss(forward_views(state, batch), queues, 0.2)[0]

        params = state.online_parameters()
        for p in params:
            p.grad = None
        loss().backward()
        analytic = [p.grad.clone() for p in params]

        checked = agreed = 0
        eps = 1e-5
        with torch.no_grad():
            for p, grad in zip(params, analytic):
                flat, gflat = p.view(-1), grad.view(-1)
                for i in range(flat.numel()):
                    if abs(float(gflat[i])) <= 1e-8:
                        continue
                    original = float(flat[i])
                    flat[i] = original + eps
                    up = float(loss())
                    flat[i] = original - eps
                    down = float(loss())
                    flat[i] = original
                    numeric = (up - down) / (2 * eps)
                    g = float(gflat[i])
                    checked += 1
                    agreed += abs(numeric - g) / max(abs(g), abs(numeric)) <= 1e-3
        assert checked > 100
        assert agreed / checked >= 0.99


class TestMomentumUpdate:
    """Test the exponential moving average."""

    @pytest.mark.parametrize('m', [0.0, 0.5, 0.999, 1.0])
    def test_mixing_identity(self, tiny_learner_config, m):
        state = build_state(tiny_learner_config)
        with torch.no_grad():
            for p in state.online_parameters():
                p.add_(torch.randn_like(p))
        before = [p.detach().clone() for p in state.momentum_parameters()]
        momentum_update(state, m)
        for after, old, online in zip(state.momentum_parameters(), before, state.online_parameters()):
            assert torch.equal(after, old * m + online * (1.0 - m))
        if m == 0.0:
            assert all(torch.equal(a, o) for a, o in zip(state.momentum_parameters(), state.online_parameters()))
        if m == 1.0:
            assert all(torch.equal(a, o) for a, o in zip(state.momentum_parameters(), before))

    def test_scalar_arithmetic(self, tiny_learner_config):
        state = build_state(tiny_learner_config)
        with torch.no_grad():
            for p in state.online_parameters():
                p.zero_()
            for p in state.momentum_parameters():
                p.fill_(1.0)
        momentum_update(state, 0.999)
        for p in state.momentum_parameters():
            assert torch.allclose(p, torch.full_like(p, 0.999))

    def test_out_of_range(self, tiny_learner_config):
        with pytest.raises(ValueError):
            momentum_update(build_state(tiny_learner_config), 1.5)


class TestSchedule:
    """Test the piecewise-constant learning rate."""

    def test_milestones(self):
        config = LearnerConfig()
        assert lr_at(0, 1000, config) == 0.03
        assert lr_at(599, 1000, config) == 0.03
        assert lr_at(600, 1000, config) == pytest.approx(0.003)
        assert lr_at(700, 1000, config) == pytest.approx(0.003)
        assert lr_at(900, 1000, config) == pytest.approx(0.0003)


class TestTrainStep:
    """Test one optimisation step."""

    def test_zero_lr_changes_nothing_but_queues(self, tiny_learner_config):
        state = build_state(tiny_learner_config)
        optimizer = make_optimizer(state, tiny_learner_config)
        before = [p.detach().clone() for p in state.online_parameters()]
        metrics = train_step(state, _random_batch(batch=3), optimizer, lr=0.0)
        assert metrics['lr'] == 0.0
        assert all(torch.equal(a, b) for a, b in zip(state.online_parameters(), before))
        assert [len(q) for q in state.queues] == [3, 3, 3]
        assert int(state.step) == 1

    def test_effect_order(self, tiny_learner_config):
        state = build_state(tiny_learner_config)
        optimizer = make_optimizer(state, tiny_learner_config)
        train_step(state, _random_batch(seed=1), optimizer, lr=0.05)
        momentum_before = [p.detach().clone() for p in state.momentum_parameters()]
        batch = _random_batch(seed=2)
        with torch.no_grad():
            expected_keys = forward_views(state, batch)
        train_step(state, batch, optimizer, lr=0.05)
        m = state.momentum_coef
        for after, old, online in zip(state.momentum_parameters(), momentum_before, state.online_parameters()):
            assert torch.equal(after, old * m + online * (1.0 - m))
            assert after.grad is None
        # Keys are computed before the momentum update.
        assert torch.allclose(state.queues[0].contents()[-2:], expected_keys.k0[0], atol=1e-6)
        assert torch.allclose(state.queues[1].contents()[-2:], expected_keys.k1[1], atol=1e-6)
        assert torch.allclose(state.queues[2].contents()[-2:], expected_keys.k2[2], atol=1e-6)

    def test_first_step_has_only_hard_negatives(self, tiny_learner_config):
        state = build_state(tiny_learner_config)
        metrics = train_step(state, _random_batch(), make_optimizer(state, tiny_learner_config))
        assert metrics['L0'] == 0.0
        assert metrics['L1'] > 0.0 and metrics['L2'] > 0.0

    def test_non_finite_loss_aborts(self, tiny_learner_config, mocker):
        state = build_state(tiny_learner_config)
        nan = torch.tensor(float('nan'))
        mocker.patch('core.learner.seco_loss', return_value=(nan, nan, nan, nan))
        with pytest.raises(NonFiniteError, match='non-finite loss'):
            train_step(state, _random_batch(), make_optimizer(state, tiny_learner_config))
        assert int(state.step) == 0

    @pytest.mark.parametrize('method', ['moco', 'moco_tp'])
    def test_single_subspace_baselines(self, tiny_learner_config, method):
        config = tiny_learner_config.model_copy(update={'method': method})
        state = build_state(config)
        assert state.num_subspaces == 1
        train_step(state, _random_batch(method=method), make_optimizer(state, config))
        metrics = train_step(state, _random_batch(seed=1, method=method), make_optimizer(state, config))
        assert metrics['L1'] == 0.0 and metrics['L2'] == 0.0 and metrics['L0'] > 0.0


class TestCheckpoints:
    """Test checkpoint persistence."""

    def test_round_trip_reproduces_loss(self, tmp_path, tiny_learner_config):
        state = build_state(tiny_learner_config)
        optimizer = make_optimizer(state, tiny_learner_config)
        for seed in range(3):
            train_step(state, _random_batch(seed=seed), optimizer)
        fixed = _random_batch(seed=99)
        expected = evaluate_batch(state, fixed)
        path = save_checkpoint(tmp_path / 'ckpt.pt', state, optimizer, epoch=1)
        restored, payload = load_checkpoint(path)
        assert payload['step'] == 3 and payload['epoch'] == 1
        assert int(restored.step) == 3
        for a, b in zip(restored.queues, state.queues):
            assert torch.equal(a.contents(), b.contents())
        got = evaluate_batch(restored, fixed)
        for key in ('total', 'L0', 'L1', 'L2'):
            assert got[key] == pytest.approx(expected[key], abs=1e-6)

    def test_load_encoder_is_online_encoder(self, tmp_path, tiny_learner_config):
        state = build_state(tiny_learner_config)
        path = save_checkpoint(tmp_path / 'ckpt.pt', state)
        encoder = load_encoder(path)
        assert not encoder.training
        assert parameter_checksum(encoder) == parameter_checksum(state.encoder)

    def test_missing(self, tmp_path):
        with pytest.raises(CheckpointError, match='not found'):
            read_checkpoint(tmp_path / 'absent.pt')

    def test_foreign_file(self, tmp_path):
        path = tmp_path / 'other.pt'
        torch.save({'weights': torch.zeros(2)}, path)
        with pytest.raises(CheckpointError, match='not a checkpoint'):
            read_checkpoint(path)

    def test_unknown_version(self, tmp_path):
        path = tmp_path / 'future.pt'
        torch.save({'format': 'seco-checkpoint', 'version': 99}, path)
        with pytest.raises(CheckpointError, match='version'):
            read_checkpoint(path)

    def test_random_encoder_is_seeded(self, tiny_learner_config):
        a = random_encoder(tiny_learner_config, seed=5)
        b = random_encoder(tiny_learner_config, seed=5)
        assert parameter_checksum(a) == parameter_checksum(b)


def _final_parameters(path):
    state, _ = load_checkpoint(path)
    return [p.detach().clone() for p in state.parameters()]


class TestPretrain:
    """Test the epoch loop, logging and resumption."""

    def test_two_epochs(self, tmp_path, stacks, tiny_learner_config, views_config):
        final = pretrain(stacks, tiny_learner_config, views_config, tmp_path, progress=False)
        assert final == tmp_path / 'final.pt'
        payload = read_checkpoint(final)
        assert payload['step'] == 4 and payload['epoch'] == 2
        log = (tmp_path / 'train_log.csv').read_text(encoding='utf-8').splitlines()
        assert log[0] == 'step,epoch,lr,L0,L1,L2,total,wall_ms'
        steps = [int(line.split(',')[0]) for line in log[1:]]
        assert steps == [0, 1, 2, 3]
        assert sorted(p.name for p in (tmp_path / 'checkpoints').glob('*.pt')) == ['epoch_0001.pt', 'epoch_0002.pt']

    def test_deterministic(self, tmp_path, stacks, tiny_learner_config, views_config):
        a = pretrain(stacks, tiny_learner_config, views_config, tmp_path / 'a', progress=False)
        b = pretrain(stacks, tiny_learner_config, views_config, tmp_path / 'b', progress=False)
        for x, y in zip(_final_parameters(a), _final_parameters(b)):
            assert torch.equal(x, y)

    def test_resume_matches_uninterrupted_run(self, tmp_path, stacks, tiny_learner_config, views_config):
        full = pretrain(stacks, tiny_learner_config, views_config, tmp_path / 'full', progress=False)
        short = tiny_learner_config.model_copy(update={'epochs': 1})
        pretrain(stacks, short, views_config, tmp_path / 'resumed', progress=False)
        resumed = pretrain(stacks, tiny_learner_config, views_config, tmp_path / 'resumed', resume=True, progress=False)
        for x, y in zip(_final_parameters(full), _final_parameters(resumed)):
            assert torch.allclose(x, y, atol=1e-6)
        log = (tmp_path / 'resumed' / 'train_log.csv').read_text(encoding='utf-8').splitlines()
        assert [int(line.split(',')[0]) for line in log[1:]] == [0, 1, 2, 3]

    def test_too_few_locations(self, tmp_path, stacks, tiny_learner_config, views_config):
        config = tiny_learner_config.model_copy(update={'batch_size': 16})
        with pytest.raises(ValueError, match='fewer than batch_size'):
            pretrain(stacks, config, views_config, tmp_path, progress=False)

    def test_divergence_writes_diagnostics(self, tmp_path, stacks, tiny_learner_config, views_config, mocker):
        mocker.patch(
            'core.learner.train_step',
            side_effect=NonFiniteError('non-finite loss at step 0', {'where': 'loss', 'step': 0}),
        )
        with pytest.raises(NonFiniteError):
            pretrain(stacks, tiny_learner_config, views_config, tmp_path, progress=False)
        diagnostics = json.loads((tmp_path / 'diagnostics.json').read_text(encoding='utf-8'))
        assert diagnostics['where'] == 'loss'

    def test_subspace_similarity_shape(self, stacks, tiny_learner_config, views_config):
        state = build_state(tiny_learner_config)
        sims = subspace_similarity(state, stacks[:4], np.random.default_rng(0), views_config)
        assert set(sims) == {'seasonal', 'artificial'}
        for values in sims.values():
            assert len(values) == 3
            assert all(-1.0 - 1e-6 <= v <= 1.0 + 1e-6 for v in values)

    def test_make_batch_per_method(self, stacks, views_config):
        rngs = [np.random.default_rng(i) for i in range(3)]
        assert set(make_batch(stacks[:3], rngs, views_config, 'seco')) == {'x_q', 'x_k0', 'x_k1', 'x_k2'}
        rngs = [np.random.default_rng(i) for i in range(3)]
        assert set(make_batch(stacks[:3], rngs, views_config, 'moco_tp')) == {'x_q', 'x_k'}
