"""Train the gradient-boosted target model, calibrate it to a false positive budget, and query it."""

# %%
import tempfile

import numpy as np

from pe_evade.campaign import featurize
from pe_evade.corpus import SyntheticCorpusSpec, gen_corpus, load_manifest, read_sample
from pe_evade.gbdt import GbdtParams, ModelOracle, calibrate_threshold, train, validation_rows

corpus = tempfile.mkdtemp(prefix="demo_corpus_")
gen_corpus(SyntheticCorpusSpec(n_benign=400, n_malicious=400), seed=1, out_dir=corpus)
entries = load_manifest(corpus)
data = featurize(corpus, entries)
print(data.X.shape, np.bincount(data.y))

# %%
model = train(data, GbdtParams(n_rounds=60, max_depth=4))
print("log-loss by round:", np.round(model.metrics.train_logloss[::10], 4))
print("validation AUC:", model.metrics.holdout_auc)

# %% pick eta so that at most 1% of validation benigns are flagged
_, ho = validation_rows(data, model.params)
cal = calibrate_threshold(model, data.subset(ho), 0.01)
model.threshold = cal.threshold
print(f"eta={cal.threshold:.4f}  fpr={cal.fpr:.3f}  tpr={cal.tpr:.3f}")

# %% which features did the trees lean on?
used = np.concatenate([t.feature[t.feature >= 0] for t in model.trees])
top = np.bincount(used, minlength=data.X.shape[1]).argsort()[::-1][:10]
print("most split-on feature indices:", top)

# %% an attacker only ever sees labels
oracle = ModelOracle(model)
print([oracle.label(read_sample(corpus, e)) for e in entries[-5:]], "queries:", oracle.queries)
