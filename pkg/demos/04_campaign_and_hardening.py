"""One full campaign against the GBDT target, then retrain on what it found.

Same thing as ``pe-evade campaign run`` followed by ``pe-evade harden``.
A few minutes on one core.
"""

# %%
import json
import os
import tempfile

from pe_evade.campaign import CampaignConfig, fingerprint_report, harden_campaign, run_campaign
from pe_evade.corpus import SyntheticCorpusSpec, gen_corpus

work = tempfile.mkdtemp(prefix="demo_campaign_")
corpus = os.path.join(work, "corpus")
gen_corpus(SyntheticCorpusSpec(n_benign=600, n_malicious=600), seed=2, out_dir=corpus)

# %%
config = CampaignConfig(corpus=corpus, output=os.path.join(work, "run"), holdout=100, budget=3000, seed=2)
out = run_campaign(config)
print(open(os.path.join(out, "report.txt")).read())

# %% artifacts the engine itself leaves behind in the evaders
fp = fingerprint_report(os.path.join(out, "evaders"), corpus)
print(json.dumps({k: fp[k] for k in ("n_evaders", "fingerprints", "flagged_blocks")}, indent=1))

# %% retrain with evaders labeled malicious; replay the frozen agent against both models
if fp["n_evaders"]:
    h = harden_campaign(out)
    print(f"agent evasion {h.before['evasion_rate']:.3f} -> {h.after['evasion_rate']:.3f}")
    print(f"validation AUC {h.auc_before:.4f} -> {h.auc_after:.4f}")
else:
    print("no evaders this time; nothing to retrain on")
