import pytest

ACCEPTANCE_LINES: list[str] = []

TINY = [
    "synth.n_items=120",
    "synth.n_users=40",
    "synth.dim={txt: 8, img: 8}",
    "synth.clusters_per_modality={txt: 4, img: 4}",
    "synth.history_length_range=[5, 8]",
    "quant.n_levels=2",
    "quant.codebook_size=8",
    "quant.kmeans_iters=10",
    "model={encoder_layers: 1, decoder_layers: 1, heads: 2, width: 16, ff_width: 32}",
    "schedule={phase_a_steps: 10, phase_b_steps: 20, batch_size: 16, warmup_steps: 5, log_every: 0}",
    "data.max_history_items=3",
    "data.filter_items=false",
    "eval.beam_width=5",
    "seeds=[0]",
]


@pytest.fixture
def tiny_overrides():
    return list(TINY)


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

    def record(number, title, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} | {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
