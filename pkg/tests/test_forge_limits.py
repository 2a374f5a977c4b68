from forge_limits import LIMITS


def test_clamp_workers():
    assert LIMITS.clamp_workers(0) == LIMITS.MIN_WORKERS
    assert LIMITS.clamp_workers(4) == 4
    assert LIMITS.clamp_workers(1000) == LIMITS.MAX_WORKERS


def test_check_generation():
    assert LIMITS.check_generation(50, 0.8, 0.4).within_limits
    result = LIMITS.check_generation(0, 1.2, -0.1)
    assert not result.within_limits
    assert len(result.exceeded) == 3


def test_generation_defaults():
    assert LIMITS.CROSS_ATTENTION_FRACTION == 0.8
    assert LIMITS.INVERSION_TOLERANCE == 0.05
    assert "Límites del forjador" in str(LIMITS)
