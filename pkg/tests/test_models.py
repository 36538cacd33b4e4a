import math

import numpy as np
import pytest
import torch

from avasr.alphabet import Alphabet
from avasr.checkpoint import load_lm, load_model, save_lm, save_model
from avasr.features import FeatureSequence
from avasr.models import (
    AttentionState,
    BlstmEncoder,
    CharRnnLm,
    EarlyFusionEncoder,
    EncoderStates,
    LmConfig,
    ModelConfig,
    attention_step,
    blstm_encode,
    build_lm,
    build_model,
    decoder_step,
    early_fusion_encode,
    lm_step,
    to_tensor,
)
from avasr.numerics import rel_error, seeded_rng

AB = Alphabet(("a", "b", "c"))


def tiny_config(kind="audio", input_dim=4):
    return ModelConfig(
        kind=kind, input_dim=input_dim, visual_dim=3, enc_hidden=5, enc_layers=1,
        dec_hidden=6, att_dim=5, att_channels=2, att_kernel=3, embed_dim=4,
    )


def feat(rng, t, d, fps=100.0, kind="audio"):
    return FeatureSequence(rng.normal(size=(t, d)), fps, kind)


def flat_params(module):
    return torch.cat([p.detach().reshape(-1) for p in module.parameters()]).numpy().copy()


def set_params(module, flat):
    i = 0
    with torch.no_grad():
        for p in module.parameters():
            n = p.numel()
            p.copy_(torch.as_tensor(flat[i : i + n], dtype=p.dtype).reshape(p.shape))
            i += n


def param_fd_check(module, loss_fn, tol=1e-4, h=1e-5):
    module.zero_grad()
    loss_fn().backward()
    analytic = torch.cat(
        [
            (p.grad if p.grad is not None else torch.zeros_like(p)).reshape(-1)
            for p in module.parameters()
        ]
    ).numpy()
    base = flat_params(module)

    def f(flat):
        set_params(module, flat)
        with torch.no_grad():
            return float(loss_fn())

    fd = np.zeros_like(base)
    for i in range(base.size):
        x = base.copy()
        x[i] += h
        set_params(module, x)
        with torch.no_grad():
            fp = float(loss_fn())
        x[i] -= 2 * h
        set_params(module, x)
        with torch.no_grad():
            fm = float(loss_fn())
        fd[i] = (fp - fm) / (2 * h)
    set_params(module, base)
    assert rel_error(analytic, fd) < tol


class TestBlstmEncoder:
    def test_t1_forward_backward_equal_with_tied_weights(self):
        enc = BlstmEncoder(4, 5, 1)
        with torch.no_grad():
            enc.lstm.weight_ih_l0_reverse.copy_(enc.lstm.weight_ih_l0)
            enc.lstm.weight_hh_l0_reverse.copy_(enc.lstm.weight_hh_l0)
            enc.lstm.bias_ih_l0_reverse.copy_(enc.lstm.bias_ih_l0)
            enc.lstm.bias_hh_l0_reverse.copy_(enc.lstm.bias_hh_l0)
        x = to_tensor(seeded_rng(0).normal(size=(1, 4)))
        out = enc(x)
        np.testing.assert_allclose(out[0, :5].detach().numpy(), out[0, 5:].detach().numpy(), atol=1e-12)

    def test_reversal_equivariance_single_layer_tied_weights(self):
        enc = BlstmEncoder(4, 5, 1)
        with torch.no_grad():
            enc.lstm.weight_ih_l0_reverse.copy_(enc.lstm.weight_ih_l0)
            enc.lstm.weight_hh_l0_reverse.copy_(enc.lstm.weight_hh_l0)
            enc.lstm.bias_ih_l0_reverse.copy_(enc.lstm.bias_ih_l0)
            enc.lstm.bias_hh_l0_reverse.copy_(enc.lstm.bias_hh_l0)
        x = to_tensor(seeded_rng(1).normal(size=(6, 4)))
        out = enc(x).detach().numpy()
        rev = enc(torch.flip(x, dims=[0])).detach().numpy()
        swapped = np.concatenate([out[:, 5:], out[:, :5]], axis=1)
        np.testing.assert_allclose(rev, swapped[::-1], atol=1e-12)

    def test_shape_mismatch_rejected(self):
        enc = BlstmEncoder(4, 5, 1)
        with pytest.raises(ValueError):
            enc(to_tensor(np.zeros((3, 7))))

    def test_deterministic(self):
        model = build_model(AB, tiny_config(), seed=3)
        x = feat(seeded_rng(2), 5, 4)
        a = blstm_encode(x, model.encoder).h.detach().numpy()
        b = blstm_encode(x, model.encoder).h.detach().numpy()
        np.testing.assert_array_equal(a, b)

    def test_gradient_matches_fd(self):
        rng = seeded_rng(4)
        for seed in range(3):
            enc = BlstmEncoder(3, 4, 1)
            torch.manual_seed(seed)
            for p in enc.parameters():
                torch.nn.init.uniform_(p, -0.2, 0.2)
            x = to_tensor(rng.normal(size=(4, 3)))
            w = to_tensor(rng.normal(size=(4, 8)))
            param_fd_check(enc, lambda: (enc(x) * w).sum())


class TestAttention:
    def test_alignment_is_distribution(self):
        model = build_model(AB, tiny_config(), seed=5)
        rng = seeded_rng(6)
        enc = EncoderStates(to_tensor(rng.normal(size=(7, 10))), 100.0)
        state = model.decoder.init_state(enc)
        context, new = attention_step(state, enc, model.decoder.attention)
        align = new.alignment.detach().numpy()
        assert np.all(align >= 0)
        assert align.sum() == pytest.approx(1.0, abs=1e-9)
        assert context.shape == (10,)

    def test_zero_score_weights_give_uniform(self):
        model = build_model(AB, tiny_config(), seed=7)
        att = model.decoder.attention
        with torch.no_grad():
            att.score.weight.zero_()
        rng = seeded_rng(8)
        enc = EncoderStates(to_tensor(rng.normal(size=(6, 10))), 100.0)
        state = model.decoder.init_state(enc)
        context, new = attention_step(state, enc, model.decoder.attention)
        np.testing.assert_allclose(new.alignment.detach().numpy(), np.full(6, 1 / 6), atol=1e-12)
        np.testing.assert_allclose(context.detach().numpy(), enc.h.mean(dim=0).numpy(), atol=1e-12)

    def test_gradient_wrt_encoder_states(self):
        model = build_model(AB, tiny_config(), seed=9)
        rng = seeded_rng(10)
        h0 = rng.normal(size=(5, 10))
        state = model.decoder.init_state(EncoderStates(to_tensor(h0), 100.0))
        align0 = state.alignment.clone()
        hidden0 = state.hidden.clone()

        def context_sum(h_np):
            enc = EncoderStates(to_tensor(h_np), 100.0)
            st = AttentionState(align0.clone(), hidden0.clone(), state.cell.clone())
            ctx, _ = attention_step(st, enc, model.decoder.attention)
            return ctx.sum().detach()

        h_t = to_tensor(h0).requires_grad_(True)
        enc = EncoderStates(h_t, 100.0)
        st = AttentionState(align0.clone(), hidden0.clone(), state.cell.clone())
        ctx, _ = attention_step(st, enc, model.decoder.attention)
        ctx.sum().backward()
        analytic = h_t.grad.numpy().copy()

        from avasr.numerics import fd_gradient

        fd = fd_gradient(lambda x: float(context_sum(x.reshape(5, 10))), h0.reshape(-1).copy())
        assert rel_error(analytic.reshape(-1), fd) < 1e-4


class TestDecoderStep:
    def test_output_normalized(self):
        model = build_model(AB, tiny_config(), seed=11)
        rng = seeded_rng(12)
        enc = EncoderStates(to_tensor(rng.normal(size=(5, 10))), 100.0)
        state = model.decoder.init_state(enc)
        _, logp = decoder_step(state, AB.sos_id, enc, model.decoder)
        assert torch.logsumexp(logp, dim=0).item() == pytest.approx(0.0, abs=1e-9)
        assert logp.shape == (AB.num_labels + 1,)

    def test_zero_output_layer_gives_uniform(self):
        model = build_model(AB, tiny_config(), seed=13)
        with torch.no_grad():
            model.decoder.out.weight.zero_()
            model.decoder.out.bias.zero_()
        rng = seeded_rng(14)
        enc = EncoderStates(to_tensor(rng.normal(size=(5, 10))), 100.0)
        _, logp = decoder_step(model.decoder.init_state(enc), 0, enc, model.decoder)
        np.testing.assert_allclose(logp.detach().numpy(), math.log(1 / (AB.num_labels + 1)), atol=1e-12)

    def test_blank_prev_label_rejected(self):
        model = build_model(AB, tiny_config(), seed=15)
        enc = EncoderStates(to_tensor(seeded_rng(16).normal(size=(4, 10))), 100.0)
        with pytest.raises(ValueError):
            decoder_step(model.decoder.init_state(enc), AB.blank_id, enc, model.decoder)

    def test_teacher_forced_gradient(self):
        from avasr.training import attention_nll

        rng = seeded_rng(17)
        for seed in range(3):
            model = build_model(AB, tiny_config(), seed=seed)
            x = feat(rng, 5, 4)
            targets = [0, 2, 1]
            enc_fn = lambda: model.encode(x, None)
            param_fd_check(
                model.decoder, lambda: attention_nll(model, enc_fn(), targets, 0.0)
            )


class TestLm:
    def test_normalized_and_uniform_when_zeroed(self):
        lm = build_lm(AB, LmConfig(hidden=8, embed_dim=4), seed=18)
        state = lm.init_state()
        _, logp = lm_step(state, AB.sos_id, lm)
        assert torch.logsumexp(logp, dim=0).item() == pytest.approx(0.0, abs=1e-9)
        with torch.no_grad():
            lm.out.weight.zero_()
            lm.out.bias.zero_()
        _, logp = lm_step(state, AB.sos_id, lm)
        np.testing.assert_allclose(logp.detach().numpy(), math.log(1 / (AB.num_labels + 1)), atol=1e-12)

    def test_learns_bigram_structure(self):
        # count-based oracle on "ababab...": after 'a' the next char is always
        # 'b', so a trained LM must rank b above a in that context
        from avasr.lm_corpus import TextCorpus, train_lm

        corpus = TextCorpus(tuple(["ababab"] * 30), ("abab",))
        res = train_lm(corpus, AB, LmConfig(hidden=12, embed_dim=4), epochs=8, seed=19)
        lm = res.lm
        state = lm.init_state()
        with torch.no_grad():
            state, _ = lm_step(state, AB.sos_id, lm)
            _, logp = lm_step(state, AB.encode("a")[0], lm)
        assert logp[AB.encode("b")[0]] > logp[AB.encode("a")[0]]


class TestEarlyFusion:
    def make(self, seed=20):
        cfg = tiny_config(kind="av-early")
        return build_model(AB, cfg, seed=seed)

    def test_output_length_matches_input(self):
        model = self.make()
        rng = seeded_rng(21)
        a = feat(rng, 6, 4, fps=50.0)
        v = feat(rng, 6, 3, fps=50.0, kind="visual")
        out = early_fusion_encode(a, v, model.encoder)
        assert out.num_frames == 6

    def test_mismatch_rejected(self):
        model = self.make()
        rng = seeded_rng(22)
        a = feat(rng, 6, 4, fps=50.0)
        v_short = feat(rng, 5, 3, fps=50.0, kind="visual")
        with pytest.raises(ValueError):
            early_fusion_encode(a, v_short, model.encoder)
        v_fps = feat(rng, 6, 3, fps=25.0, kind="visual")
        with pytest.raises(ValueError):
            early_fusion_encode(a, v_fps, model.encoder)

    def test_zeroed_visual_branch_degenerates_to_audio_only(self):
        model = self.make()
        fusion = model.encoder
        with torch.no_grad():
            for p in fusion.visual_branch.parameters():
                p.zero_()
        rng = seeded_rng(23)
        a = to_tensor(rng.normal(size=(6, 4)))
        v = to_tensor(rng.normal(size=(6, 3)))
        branch_v = fusion.visual_branch(v)
        np.testing.assert_allclose(branch_v.detach().numpy(), 0.0, atol=1e-12)
        trunk_in = torch.cat([fusion.audio_branch(a), branch_v], dim=1)
        np.testing.assert_allclose(
            fusion(a, v).detach().numpy(), fusion.trunk(trunk_in).detach().numpy(), atol=1e-12
        )

    def test_full_path_gradient(self):
        rng = seeded_rng(24)
        for seed in range(2):
            cfg = ModelConfig(
                kind="av-early", input_dim=3, visual_dim=2, enc_hidden=3, enc_layers=1,
                dec_hidden=4, att_dim=3, att_channels=2, att_kernel=3, embed_dim=3,
            )
            model = build_model(AB, cfg, seed=seed)
            a = feat(rng, 4, 3, fps=50.0)
            v = feat(rng, 4, 2, fps=50.0, kind="visual")
            w = to_tensor(rng.normal(size=(4, 6)))
            param_fd_check(
                model.encoder, lambda: (model.encoder(to_tensor(a.frames), to_tensor(v.frames)) * w).sum()
            )


class TestCheckpoint:
    def test_model_round_trip_bit_exact(self, tmp_path):
        model = build_model(AB, tiny_config(), seed=25)
        p = tmp_path / "model.ckpt"
        save_model(p, model)
        back = load_model(p)
        assert back.alphabet.labels == AB.labels
        assert back.config == model.config
        for (k1, v1), (k2, v2) in zip(model.state_dict().items(), back.state_dict().items()):
            assert k1 == k2
            np.testing.assert_array_equal(v1.numpy(), v2.numpy())

    def test_lm_round_trip(self, tmp_path):
        cfg = LmConfig(hidden=8, embed_dim=4)
        lm = build_lm(AB, cfg, seed=26)
        p = tmp_path / "lm.ckpt"
        save_lm(p, lm, cfg)
        back = load_lm(p)
        for v1, v2 in zip(lm.state_dict().values(), back.state_dict().values()):
            np.testing.assert_array_equal(v1.numpy(), v2.numpy())

    def test_wrong_type_rejected(self, tmp_path):
        cfg = LmConfig(hidden=8, embed_dim=4)
        lm = build_lm(AB, cfg, seed=27)
        p = tmp_path / "lm.ckpt"
        save_lm(p, lm, cfg)
        with pytest.raises(ValueError):
            load_model(p)
