import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

from sidelink_sim.config import load  # noqa: E402


def small_cfg(*overrides, seed=1, vehicles=20, sim_time=2.5, length=600):
    base = [f"road.length={length}", f"road.n_vehicles={vehicles}",
            f"traffic.sim_time={sim_time}", "traffic.hpm_node_fraction=0.1"]
    return load(overrides=base + list(overrides), seed=seed)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria")


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
