import pytest

import tfeti


@pytest.fixture(scope="session")
def warm_kernels():
    """Run one tiny solve so JIT compilation never pollutes timed tests."""
    problem = tfeti.build_problem("heat", 2, 2, 2)
    for strategy in ("implicit", "explicit"):
        for path in ("trsm", "syrk"):
            for storage in ("sparse", "dense"):
                cfg = tfeti.DualOpConfig(strategy=strategy, path=path,
                                         forward_storage=storage,
                                         backward_storage=storage)
                tfeti.run_steps(problem, 1, config=cfg)
    return True
