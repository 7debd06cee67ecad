"""A tour of the PE model and the mutation engine on one synthetic file."""

# %%
import tempfile

import numpy as np

from pe_evade.corpus import SyntheticCorpusSpec, gen_corpus, load_manifest, read_sample
from pe_evade.features import BLOCK_SLICES, extract
from pe_evade.mutations import INTERNAL_ACTIONS, mutate_bytes, validity_audit
from pe_evade.pe import compute_pe_checksum, parse, read_imports, serialize, stored_checksum

corpus = tempfile.mkdtemp(prefix="demo_corpus_")
gen_corpus(SyntheticCorpusSpec(n_benign=5, n_malicious=5), seed=0, out_dir=corpus)
entry = [e for e in load_manifest(corpus) if e.label == 1][0]
raw = read_sample(corpus, entry)
print(entry.id, len(raw), "bytes")

# %% parse, look around, write it back
img = parse(raw)
for s in img.sections:
    print(f"{s.label:8s} va={s.virtual_address:#07x} vsize={s.virtual_size:6d} raw={len(s.data):6d}")
for lib in read_imports(img):
    print(lib.library, lib.functions[:4])
print("checksum stored/computed:", hex(stored_checksum(raw)), hex(compute_pe_checksum(raw)))
print("round-trip identical:", serialize(img) == raw)

# %% every internal action once, with the audit and which feature blocks moved
x0 = extract(raw)
for i, action in enumerate(INTERNAL_ACTIONS):
    out = mutate_bytes(raw, action, np.random.default_rng(i))
    report = validity_audit(raw, out)
    x1 = extract(out)
    moved = [name for name, sl in BLOCK_SLICES.items() if not np.array_equal(x0[sl], x1[sl])]
    print(f"{action.value:32s} +{len(out) - len(raw):5d}B ok={report.ok} {report.fingerprints} moved={moved}")

# %% ten random mutations in a row still give a loadable file
rng = np.random.default_rng(42)
cur = raw
for _ in range(10):
    cur = mutate_bytes(cur, INTERNAL_ACTIONS[rng.integers(len(INTERNAL_ACTIONS))], rng)
print("after 10 steps:", len(cur), "bytes, audit ok:", validity_audit(raw, cur).ok)
