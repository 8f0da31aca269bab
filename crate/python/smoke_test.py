"""End-to-end smoke test for the logo_py extension module.

Runs a miniature pipeline (collect -> train-wm -> rollout -> train-policy
-> evaluate -> report) through the bound CLI in a temporary directory,
then exercises direct checkpoint access. Exits nonzero on any failure.
"""

import math
import pathlib
import sys
import tempfile

import logo_py

TINY = [
    "--env.episode_cap", "10",
    "--data.episodes", "6",
    "--wm.steps", "40",
    "--wm.hidden", "8",
    "--wm.feature", "4",
    "--wm.val_every", "20",
    "--rollout.horizon", "3",
    "--rollout.starts", "5",
    "--policy.steps", "30",
    "--policy.batch", "8",
    "--policy.hidden", "8",
    "--policy.refresh_every", "15",
    "--policy.eval_every", "30",
    "--policy.eval_episodes", "2",
    "--seed", "0",
]


def run(cmd, *extra):
    code = logo_py.run_cli([cmd, *TINY, *extra])
    assert code == 0, f"{cmd} exited {code}"


def main():
    assert "policy.alpha = 1\n" in logo_py.default_config()
    assert logo_py.run_cli(["collect", "--data.tier", "legendary"]) == 2

    with tempfile.TemporaryDirectory() as tmp:
        out = ["--out", tmp, "--experiment", "smoke"]
        assert logo_py.run_cli(["evaluate", *TINY, *out]) == 3, "evaluate before training"

        for cmd in ["collect", "train-wm", "rollout", "train-policy", "evaluate", "report"]:
            run(cmd, *out)

        run_dir = pathlib.Path(tmp) / "smoke" / "0"
        n, provenance, n_agents = logo_py.dataset_info(str(run_dir / "dataset.logo"))
        assert (n, provenance, n_agents) == (60, "medium", 2), (n, provenance, n_agents)
        syn_n, syn_prov, _ = logo_py.dataset_info(str(run_dir / "synthetic.logo"))
        assert syn_prov == "synthetic" and syn_n == 15, (syn_n, syn_prov)

        wm = str(run_dir / "wm.logo")
        state = [0.0] * 12
        obs = [[0.0] * 8, [0.0] * 8]
        actions = [[0.1, -0.1], [0.0, 0.2]]
        next_state, reward, u = logo_py.predict(wm, state, obs, actions)
        assert len(next_state) == 12
        assert all(math.isfinite(v) for v in next_state + [reward, u])
        assert u >= 0.0
        again = logo_py.predict(wm, state, obs, actions)
        assert again == (next_state, reward, u), "prediction must be deterministic"

        try:
            logo_py.predict(wm, [0.0] * 11, obs, actions)
        except ValueError:
            pass
        else:
            raise AssertionError("short state vector must be rejected")

        pol = str(run_dir / "policy.logo")
        acts = logo_py.act(pol, obs)
        assert len(acts) == 2 and all(len(a) == 2 for a in acts)
        assert all(-1.0 <= v <= 1.0 for a in acts for v in a)

        returns = logo_py.evaluate_policy(pol, 3, 0)
        assert len(returns) == 3 and all(math.isfinite(r) for r in returns)
        assert logo_py.evaluate_policy(pol, 3, 0) == returns

        us = logo_py.uncertainties(wm, str(run_dir / "dataset.logo"))
        assert len(us) == 60 and all(v >= 0.0 for v in us)

        report = pathlib.Path(tmp) / "report.csv"
        assert report.exists() and "smoke" in report.read_text()

    print("smoke test passed")


if __name__ == "__main__":
    sys.exit(main())
