import os
import stat

import numpy as np
import pytest
import torch

from dad4ts.conditioner import (
    CACHE_ENV_VAR,
    CONDITION_DIM,
    Condition,
    ExecutableProvider,
    MoeGate,
    ProviderRegistry,
    RandomProjectionProvider,
    cfg_dropout,
    embed,
    moe_gate,
    null_condition,
)
from dad4ts.errors import ConfigurationError, ContractError, RegistryError


@pytest.fixture
def registry():
    return ProviderRegistry(
        [
            RandomProjectionProvider(12, provider_id="a", seed=1),
            RandomProjectionProvider(12, provider_id="b", seed=2),
            RandomProjectionProvider(12, provider_id="c", seed=3),
        ]
    )


class TestCondition:
    def test_null_condition(self):
        c = null_condition()
        assert c.is_null
        assert np.array_equal(c.vector, np.zeros(CONDITION_DIM))

    def test_null_with_nonzero_rejected(self):
        with pytest.raises(ContractError):
            Condition(vector=np.ones(CONDITION_DIM), provider_id="x", is_null=True)

    def test_wrong_size_rejected(self):
        with pytest.raises(ContractError):
            Condition(vector=np.zeros(7), provider_id="x")


class TestEmbed:
    def test_deterministic(self, registry):
        w = np.random.default_rng(0).standard_normal(12)
        assert np.array_equal(embed(w, "a", registry), embed(w, "a", registry))

    def test_zero_window_finite(self, registry):
        out = embed(np.zeros(12), "a", registry)
        assert out.shape == (CONDITION_DIM,)
        assert np.isfinite(out).all()

    def test_unknown_provider(self, registry):
        with pytest.raises(RegistryError):
            embed(np.zeros(12), "nope", registry)

    def test_providers_differ(self, registry):
        w = np.random.default_rng(1).standard_normal(12)
        assert not np.allclose(embed(w, "a", registry), embed(w, "b", registry))


class TestMoeGate:
    def test_forced_argmax(self, registry):
        gate = MoeGate(12, len(registry))
        with torch.no_grad():
            gate.net[2].weight.zero_()
            gate.net[2].bias.copy_(torch.tensor([0.0, 5.0, 1.0], dtype=torch.float64))
        cond = moe_gate(np.ones(12), gate, registry)
        assert cond.provider_id == "b"
        assert not cond.is_null

    def test_softmax_normalized(self, registry):
        gate = MoeGate(12, len(registry))
        w = torch.as_tensor(np.random.default_rng(2).standard_normal(12))
        with torch.no_grad():
            scores = torch.softmax(gate(w.to(torch.float64)), dim=-1)
        assert float(scores.sum()) == pytest.approx(1.0, abs=1e-9)

    def test_tie_breaks_to_lowest_index(self, registry):
        gate = MoeGate(12, len(registry))
        with torch.no_grad():
            gate.net[2].weight.zero_()
            gate.net[2].bias.copy_(torch.tensor([2.0, 2.0, 2.0], dtype=torch.float64))
        cond = moe_gate(np.ones(12), gate, registry)
        assert cond.provider_id == "a"

    def test_argmax_invariant_to_logit_rescale(self, registry):
        gate = MoeGate(12, len(registry))
        w = np.random.default_rng(3).standard_normal(12)
        first = moe_gate(w, gate, registry).provider_id
        # scaling the last affine map scales every logit by the same factor
        gate2 = MoeGate(12, len(registry))
        gate2.load_state_dict(gate.state_dict())
        with torch.no_grad():
            gate2.net[2].weight.mul_(3.0)
            gate2.net[2].bias.mul_(3.0)
        assert moe_gate(w, gate2, registry).provider_id == first

    def test_gate_gradient_through_hard_route(self, registry):
        gate = MoeGate(12, len(registry))
        cond = moe_gate(np.ones(12), gate, registry)
        assert cond.grad_vector is not None
        cond.grad_vector.sum().backward()
        grads = [p.grad for p in gate.parameters() if p.grad is not None]
        assert any(float(g.abs().sum()) > 0 for g in grads)

    def test_empty_registry_rejected(self):
        gate = MoeGate(12, 1)
        with pytest.raises(ConfigurationError):
            moe_gate(np.ones(12), gate, ProviderRegistry())


class TestCfgDropout:
    def test_p_zero_keeps_condition(self, registry):
        gate = MoeGate(12, len(registry))
        c = moe_gate(np.ones(12), gate, registry)
        rng = np.random.default_rng(4)
        assert all(not cfg_dropout(c, 0.0, rng).is_null for _ in range(100))

    def test_p_one_always_null(self, registry):
        gate = MoeGate(12, len(registry))
        c = moe_gate(np.ones(12), gate, registry)
        rng = np.random.default_rng(5)
        assert all(cfg_dropout(c, 1.0, rng).is_null for _ in range(100))

    def test_p_point_one_rate(self, registry):
        gate = MoeGate(12, len(registry))
        c = moe_gate(np.ones(12), gate, registry)
        rng = np.random.default_rng(6)
        nulls = sum(cfg_dropout(c, 0.1, rng).is_null for _ in range(10_000))
        assert nulls / 10_000 == pytest.approx(0.1, abs=0.01)

    def test_invalid_probability(self):
        with pytest.raises(ContractError):
            cfg_dropout(null_condition(), 1.5, np.random.default_rng(0))


class TestExecutableProvider:
    @pytest.fixture
    def echo_script(self, tmp_path):
        script = tmp_path / "embedder.py"
        script.write_text(
            "#!/usr/bin/env python3\n"
            "import sys\n"
            "values = [float(line) for line in sys.stdin if line.strip()]\n"
            "total = sum(values)\n"
            "for i in range(512):\n"
            "    print(total + i)\n"
        )
        script.chmod(script.stat().st_mode | stat.S_IEXEC)
        return script

    def test_wire_format(self, echo_script):
        provider = ExecutableProvider("ext", echo_script)
        out = provider.embed(np.array([1.0, 2.0, 3.0]))
        assert out.shape == (CONDITION_DIM,)
        assert out[0] == 6.0 and out[511] == 6.0 + 511

    def test_cache_dir_from_env(self, echo_script, tmp_path, monkeypatch):
        cache = tmp_path / "cache"
        monkeypatch.setenv(CACHE_ENV_VAR, str(cache))
        provider = ExecutableProvider("ext", echo_script)
        window = np.array([1.0, 2.0])
        first = provider.embed(window)
        assert list(cache.glob("ext_*.npy"))
        second = provider.embed(window)
        assert np.array_equal(first, second)

    def test_missing_executable_rejected(self, tmp_path):
        with pytest.raises(ConfigurationError):
            ExecutableProvider("ext", tmp_path / "absent")

    def test_wrong_output_count(self, tmp_path):
        script = tmp_path / "short.py"
        script.write_text("#!/usr/bin/env python3\nprint(1.0)\n")
        script.chmod(script.stat().st_mode | stat.S_IEXEC)
        provider = ExecutableProvider("short", script)
        with pytest.raises(ContractError):
            provider.embed(np.array([1.0]))


def test_registry_rejects_duplicate_id():
    registry = ProviderRegistry([RandomProjectionProvider(12, provider_id="a")])
    with pytest.raises(ConfigurationError):
        registry.register(RandomProjectionProvider(12, provider_id="a"))
