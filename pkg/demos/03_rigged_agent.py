"""The agent against a target with one obvious weakness: a blacklisted section name.

Renaming that section is the one-step fix; the learned Q-values should say so.
"""

# %%
import numpy as np

from pe_evade.agent import agent_episode, train_agent
from pe_evade.corpus import rigged_sample
from pe_evade.env import EVADED, EnvConfig, EvasionEnv, SectionNameOracle, random_policy

oracle = SectionNameOracle([".evil"])
make_env = lambda: EvasionEnv(oracle, EnvConfig(seed=0))
train_set = [(f"t{i}", rigged_sample(i)) for i in range(200)]
test_set = [(f"h{i}", rigged_sample(10_000 + i)) for i in range(100)]

# %% about 1 minute on one core
result = train_agent(make_env, train_set, budget=5000, seed=0)
agent = result.agent
print(result.steps, "mutations over", len(result.episodes), "episodes;", len(result.evaders), "evaders harvested")

# %% mean Q-value per action on held-out starting states
env = make_env()
states = np.stack([env.reset(b) for _, b in test_set])
q = agent.net.q_values(states).mean(axis=0)
for name, v in sorted(zip(agent.actions, q), key=lambda t: -t[1]):
    print(f"{name:32s} {v:6.2f}")

# %% greedy agent vs uniform random on the held-out files
rng = np.random.default_rng(1)
ours = [agent_episode(env, agent, b, sid, rng) for sid, b in test_set]
theirs = [random_policy(env, b, rng, sid) for sid, b in test_set]
rate = lambda eps: np.mean([e.outcome == EVADED for e in eps])
print(f"agent {rate(ours):.2f}   random {rate(theirs):.2f}")
print("agent episode lengths:", np.bincount([len(e.steps) for e in ours if e.outcome == EVADED]))
