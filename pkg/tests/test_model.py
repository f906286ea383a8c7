import math

import numpy as np
import pytest
import torch

from bsarec.model import (
    BSARec,
    CausalSelfAttention,
    ConfigError,
    ModelConfig,
    batch_loss,
    load_checkpoint,
    save_checkpoint,
    sequence_loss,
)
from bsarec.signal import SpectralBackend, rescale


def tiny_config(**overrides) -> ModelConfig:
    base = dict(num_items=12, max_len=8, hidden_size=8, num_layers=2, num_heads=2,
                alpha=0.5, cutoff=2, dropout_rate=0.0)
    base.update(overrides)
    return ModelConfig(**base)


def central_difference(fn, x: torch.Tensor, step: float = 1e-5) -> torch.Tensor:
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        up = fn().item()
        flat[i] = orig - step
        down = fn().item()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return grad


class TestConfig:
    def test_defaults(self):
        cfg = ModelConfig(num_items=10)
        assert (cfg.hidden_size, cfg.num_layers, cfg.dropout_rate, cfg.ffn_multiplier) == (64, 2, 0.5, 4)

    @pytest.mark.parametrize("overrides", [
        {"hidden_size": 10, "num_heads": 4},
        {"alpha": 1.5},
        {"cutoff": 30},
        {"cutoff": 0},
        {"backend": "wavelet", "cutoff": 60},
    ])
    def test_invalid(self, overrides):
        with pytest.raises(ConfigError):
            ModelConfig(num_items=10, **overrides)

    def test_residual_accepts_any_cutoff(self):
        assert ModelConfig(num_items=10, backend="residual", cutoff=999).cutoff == 999

    def test_dict_round_trip(self):
        cfg = tiny_config(backend="wavelet", padding="reflect")
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown"):
            ModelConfig.from_dict({"num_items": 3, "depth": 2})


class TestEmbed:
    def test_shape(self):
        model = BSARec(ModelConfig(num_items=30, max_len=50, hidden_size=64)).eval()
        x = model.embed(torch.randint(0, 31, (3, 50)))
        assert x.shape == (3, 50, 64)

    def test_all_pad_window_uses_pad_row(self):
        model = BSARec(tiny_config()).eval()
        x = model.embed(torch.zeros(1, 8, dtype=torch.long))
        raw = model.item_embeddings.weight[0] + model.position_embeddings.weight
        torch.testing.assert_close(x[0], model.embed_norm(raw))

    def test_deterministic_in_eval(self):
        model = BSARec(tiny_config(dropout_rate=0.5)).eval()
        inputs = torch.randint(0, 13, (2, 8))
        torch.testing.assert_close(model.encode(inputs), model.encode(inputs), rtol=0, atol=0)

    def test_out_of_vocab(self):
        model = BSARec(tiny_config())
        with pytest.raises(IndexError):
            model.embed(torch.full((1, 8), 13))

    def test_wrong_length(self):
        model = BSARec(tiny_config())
        with pytest.raises(ValueError, match="window length"):
            model.embed(torch.ones(1, 7, dtype=torch.long))


class TestAttention:
    def test_single_position_returns_value_projection(self):
        torch.manual_seed(0)
        attn = CausalSelfAttention(4, 2, 0.0).eval()
        x = torch.randn(1, 1, 4)
        torch.testing.assert_close(attn(x), attn.out(attn.value(x)))

    def test_uniform_keys_give_uniform_prefix_weights(self):
        attn = CausalSelfAttention(4, 1, 0.0).eval()
        with torch.no_grad():
            attn.key.weight.zero_()
            attn.key.bias.fill_(0.3)
        with torch.no_grad():
            _, weights = attn(torch.randn(1, 5, 4), return_weights=True)
        for t in range(5):
            np.testing.assert_allclose(weights[0, 0, t, : t + 1].numpy(), 1 / (t + 1), rtol=1e-6)
            assert float(weights[0, 0, t, t + 1 :].abs().sum()) < 1e-6

    def test_causality(self):
        torch.manual_seed(1)
        attn = CausalSelfAttention(8, 2, 0.0).eval()
        x = torch.randn(1, 6, 8)
        base = attn(x)
        for t in range(6):
            y = x.clone()
            y[0, t] += torch.randn(8)
            out = attn(y)
            torch.testing.assert_close(out[0, :t], base[0, :t])

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(2)
        attn = CausalSelfAttention(4, 2, 0.0).double().eval()
        x = torch.randn(1, 4, 4, dtype=torch.float64, requires_grad=True)
        w = torch.randn(1, 4, 4, dtype=torch.float64)

        def fn():
            return (attn(x) * w).sum()

        fn().backward()
        analytic = x.grad.clone()
        with torch.no_grad():
            numeric = central_difference(fn, x)
        rel = (analytic - numeric).abs().max() / analytic.abs().max()
        assert rel <= 1e-4


class TestRescalerBranch:
    @pytest.mark.parametrize("backend", list(SpectralBackend))
    def test_matches_signal_rescale_per_channel(self, backend):
        cfg = tiny_config(backend=backend, cutoff=3)
        model = BSARec(cfg).double()
        rescaler = model.layers[0].rescaler
        rng = np.random.default_rng(0)
        with torch.no_grad():
            rescaler.beta.copy_(torch.from_numpy(rng.uniform(0, 2, size=8)))
        x = torch.from_numpy(rng.normal(size=(1, 8, 8)))
        out = rescaler.rescale(x)[0].detach().numpy()
        for j in range(8):
            expected = rescale(x[0, :, j].numpy(), 3, float(rescaler.beta[j].detach()), backend)
            np.testing.assert_allclose(out[:, j], expected, atol=1e-12)

    def test_beta_one_is_layer_norm(self):
        model = BSARec(tiny_config())
        rescaler = model.layers[0].rescaler
        x = torch.randn(2, 8, 8)
        torch.testing.assert_close(rescaler(x), rescaler.norm(x))

    def test_residual_ignores_beta(self):
        model = BSARec(tiny_config(backend="residual"))
        rescaler = model.layers[0].rescaler
        with torch.no_grad():
            rescaler.beta.uniform_(0, 3)
        x = torch.randn(2, 8, 8)
        torch.testing.assert_close(rescaler(x), rescaler.norm(x))

    def test_full_band_cutoff_is_identity(self):
        model = BSARec(tiny_config(cutoff=5))
        rescaler = model.layers[0].rescaler
        with torch.no_grad():
            rescaler.beta.uniform_(0, 3)
        x = torch.randn(2, 8, 8)
        torch.testing.assert_close(rescaler(x), rescaler.norm(x), atol=1e-5, rtol=1e-5)


class TestBSALayer:
    def _branches(self, layer, x):
        return layer.attention(x), layer.rescaler(x)

    def test_alpha_zero_is_attention(self):
        model = BSARec(tiny_config(alpha=0.0)).eval()
        layer = model.layers[0]
        x = torch.randn(1, 8, 8)
        attn, _ = self._branches(layer, x)
        torch.testing.assert_close(layer.mix(x), attn, rtol=0, atol=0)

    def test_alpha_one_is_rescaler(self):
        model = BSARec(tiny_config(alpha=1.0)).eval()
        layer = model.layers[0]
        x = torch.randn(1, 8, 8)
        _, branch = self._branches(layer, x)
        torch.testing.assert_close(layer.mix(x), branch)

    def test_mix_is_affine_in_alpha(self):
        model = BSARec(tiny_config()).eval()
        layer = model.layers[0]
        x = torch.randn(1, 8, 8)
        attn, branch = self._branches(layer, x)
        for alpha in (0.0, 0.1, 0.5, 0.9, 1.0):
            layer.alpha = alpha
            torch.testing.assert_close(layer.mix(x), (1 - alpha) * attn + alpha * branch)

    def test_equal_branches_mix_to_same(self):
        model = BSARec(tiny_config()).eval()
        layer = model.layers[0]
        y = torch.randn(1, 8, 8)
        layer.attention.forward = lambda x, key_mask=None: y
        layer.rescaler.forward = lambda x: y
        torch.testing.assert_close(layer.mix(torch.zeros(1, 8, 8)), y)

    def test_alpha_zero_matches_rescaler_free_build_bitwise(self):
        cfg = tiny_config(alpha=0.0, dropout_rate=0.3)
        torch.manual_seed(5)
        full = BSARec(cfg)
        torch.manual_seed(5)
        bare = BSARec(cfg, include_rescaler=False)
        shared = {k: v for k, v in full.state_dict().items() if "rescaler" not in k}
        for k, v in bare.state_dict().items():
            assert torch.equal(v, shared[k])
        inputs = torch.randint(0, 13, (4, 8))
        targets = torch.randint(1, 13, (4, 8))
        mask = torch.ones(4, 8, dtype=torch.bool)
        torch.manual_seed(9)
        loss_full = batch_loss(full.train(), inputs, targets, mask)
        torch.manual_seed(9)
        loss_bare = batch_loss(bare.train(), inputs, targets, mask)
        assert loss_full.item() == loss_bare.item()


class TestEncoder:
    def test_zero_layers_returns_embedding(self):
        model = BSARec(tiny_config(num_layers=0)).eval()
        inputs = torch.randint(0, 13, (2, 8))
        torch.testing.assert_close(model.encode(inputs), model.embed(inputs))

    def test_seeded_determinism(self):
        inputs = torch.randint(0, 13, (2, 8))
        outs = []
        for _ in range(2):
            torch.manual_seed(3)
            outs.append(BSARec(tiny_config()).eval().encode(inputs))
        assert torch.equal(outs[0], outs[1])

    @pytest.mark.parametrize("backend", list(SpectralBackend))
    def test_finite_on_random_params(self, backend):
        cfg = ModelConfig(num_items=40, max_len=20, hidden_size=16, num_heads=4, cutoff=3, backend=backend)
        torch.manual_seed(0)
        model = BSARec(cfg).eval()
        with torch.no_grad():
            for p in model.parameters():
                p.normal_(0, 1.0)
            model.project_betas()
        inputs = torch.randint(0, 41, (1000, 20))
        inputs[:300, :10] = 0
        assert torch.isfinite(model.encode(inputs)).all()


class TestScoring:
    def test_orthonormal_argmax(self):
        cfg = tiny_config(num_items=7, hidden_size=8)
        model = BSARec(cfg)
        with torch.no_grad():
            model.item_embeddings.weight.copy_(torch.eye(8))
        for k in range(1, 8):
            assert int(model.score(torch.eye(8)[k][None]).argmax()) == k

    def test_pad_never_ranked(self):
        model = BSARec(tiny_config())
        logits = model.score(torch.randn(5, 8))
        assert torch.isneginf(logits[:, 0]).all()

    def test_logit_shape(self):
        model = BSARec(tiny_config())
        assert model(torch.randint(0, 13, (1, 8))).shape == (1, 8, 13)


class TestLoss:
    def test_uniform_logits(self):
        logits = torch.zeros(2, 3, 10)
        logits[..., 0] = float("-inf")
        targets = torch.randint(1, 10, (2, 3))
        mask = torch.ones(2, 3, dtype=torch.bool)
        assert sequence_loss(logits, targets, mask).item() == pytest.approx(math.log(9))

    def test_confident_logits_approach_zero(self):
        targets = torch.tensor([[2, 3]])
        logits = torch.full((1, 2, 5), -1e3)
        logits[0, 0, 2] = logits[0, 1, 3] = 1e3
        assert sequence_loss(logits, targets, torch.ones(1, 2, dtype=torch.bool)).item() < 1e-12

    def test_masked_positions_ignored(self):
        logits = torch.randn(1, 3, 5)
        targets = torch.tensor([[0, 2, 4]])
        mask = torch.tensor([[False, False, True]])
        expected = -torch.log_softmax(logits[0, 2], -1)[4]
        assert sequence_loss(logits, targets, mask).item() == pytest.approx(expected.item())

    def test_no_supervised_position(self):
        with pytest.raises(ValueError, match="no supervised"):
            sequence_loss(torch.randn(1, 2, 4), torch.tensor([[1, 2]]), torch.zeros(1, 2, dtype=torch.bool))

    def test_gradient_finite_differences(self):
        logits = torch.randn(2, 2, 4, dtype=torch.float64, requires_grad=True)
        targets = torch.tensor([[1, 3], [2, 1]])
        mask = torch.tensor([[True, True], [False, True]])

        def fn():
            return sequence_loss(logits, targets, mask)

        fn().backward()
        analytic = logits.grad.clone()
        with torch.no_grad():
            numeric = central_difference(fn, logits)
        assert ((analytic - numeric).norm() / analytic.norm()).item() <= 1e-4

    def test_batch_loss_matches_full_logits(self):
        model = BSARec(tiny_config()).eval()
        inputs = torch.randint(0, 13, (3, 8))
        targets = torch.randint(0, 13, (3, 8))
        mask = torch.rand(3, 8) > 0.3
        mask[0, -1] = True
        targets[0, -1] = 4
        expected = sequence_loss(model(inputs), targets, mask)
        torch.testing.assert_close(batch_loss(model, inputs, targets, mask), expected)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model = BSARec(tiny_config(backend="wavelet", cutoff=3)).eval()
        path = tmp_path / "m.npz"
        save_checkpoint(model, path, extra={"seed": 3})
        loaded, extra = load_checkpoint(path)
        assert extra == {"seed": 3}
        assert loaded.config == model.config
        inputs = torch.randint(0, 13, (2, 8))
        torch.testing.assert_close(loaded.encode(inputs), model.encode(inputs))

    def test_shape_validation(self, tmp_path):
        model = BSARec(tiny_config())
        path = tmp_path / "m.npz"
        save_checkpoint(model, path)
        with np.load(path) as data:
            arrays = dict(data)
        arrays["item_embeddings.weight"] = np.zeros((5, 8), dtype=np.float32)
        np.savez(path, **arrays)
        with pytest.raises(ValueError, match="shape"):
            load_checkpoint(path)

    def test_missing_parameter(self, tmp_path):
        model = BSARec(tiny_config())
        path = tmp_path / "m.npz"
        save_checkpoint(model, path)
        with np.load(path) as data:
            arrays = {k: v for k, v in data.items() if k != "layers.0.rescaler.beta"}
        np.savez(path, **arrays)
        with pytest.raises(ValueError, match="missing"):
            load_checkpoint(path)
