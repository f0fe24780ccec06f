import pytest

from selftest import GRAD_BLOCKS, SelftestReport, run_gradchecks, run_oracles, run_selftest


def test_oracle_suite_passes():
    results = run_oracles(seeds=(0,))
    failed = [(r.name, r.error) for r in results if not r.passed]
    assert not failed
    assert {"matmul", "softmax", "conv2d/stride2", "attn", "posterior/single-agent"} <= {r.name for r in results}


def test_empty_report_does_not_pass():
    assert not SelftestReport().passed


def test_unknown_suite():
    with pytest.raises(KeyError):
        run_selftest(("fuzz",))


def test_report_text_has_verdict():
    report = run_selftest(("oracle",), seeds=(1,))
    assert report.passed
    assert "selftest PASS" in report.to_text()
    assert len(report.to_frame()) == len(report.results)


@pytest.mark.slow
def test_every_block_passes_gradcheck():
    results = run_gradchecks(seeds=(0, 1, 2))
    assert {r.name for r in results} == set(GRAD_BLOCKS)
    assert all(r.passed for r in results), [(r.name, r.seed, r.error) for r in results if not r.passed]
