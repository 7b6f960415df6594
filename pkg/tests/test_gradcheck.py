import numpy as np
import pytest

from saep.errors import ArgError
from saep.gradcheck import compare, gradcheck_suite


def test_default_suite_has_no_violations():
    report = gradcheck_suite()
    assert report.violations == 0, [e for e in report.entries if not e.passed]
    ops = {e.op for e in report.entries}
    assert {"pointwise_conv", "linear", "gelu", "reorganize", "flatten", "softmax_xent"} <= ops
    assert sum(op.startswith("saep[ml=") for op in ops) == 6


def test_suite_is_deterministic():
    assert gradcheck_suite(seed=4).to_dict() == gradcheck_suite(seed=4).to_dict()


@pytest.mark.parametrize("eps", [0.0, -1e-3])
def test_nonpositive_eps_rejected(eps):
    with pytest.raises(ArgError):
        gradcheck_suite(eps=eps)


def test_compare_flags_a_wrong_gradient():
    fd = np.array([1.0, 2.0])
    assert compare("ok", [(fd + 1e-6, fd)]).passed
    bad = compare("bad", [(np.array([1.0, 2.5]), fd)])
    assert bad.violations == 1 and bad.worst_excess > 0
