"""
Asking what a latent responds to
================================

A synthetic corpus where three words and one language each switch on a
dedicated atom. Using the generating dictionary as the model, the index
answers questions about individual latents.
"""
import numpy as np

from speechsae import analysis, synthbench
from speechsae.ingest import EmbeddingSequence
from speechsae.sae import SaeParams

d = synthbench.make_dictionary(d_in=16, n_atoms=48, sparsity=3, seed=7)
corpus = synthbench.generate(d, n_files=30, frames_per_file=150, n_word_atoms=3, language_atom=47,
                             foreign_fraction=0.4)
print("word atoms:", corpus.word_atoms)

# tied weights: the encoder reads each atom back out
atoms = d.atoms
params = SaeParams(atoms.T.copy(), np.zeros(48, np.float32), atoms.copy(), np.zeros(16, np.float32))
index = analysis.build_index([EmbeddingSequence(f.file_id, f.frames) for f in corpus.files], params, k=3)
print("postings:", len(index.postings))

alignments = {f.file_id: f.alignment for f in corpus.files}

# which words keep latent 0 busy longest?
top = analysis.top_units(index, 0, alignments, "word", min_occurrences=2)
for r in top.rankings[:3]:
    print(f"  {r.text!r}: {r.mean_active_frames:.1f} active frames over {r.occurrences} occurrences")

# does latent 47 separate the Spanish files from the English ones?
languages = {f.file_id: f.language for f in corpus.files}
positives = frozenset(f for f, lang in languages.items() if lang != "en")
pr = analysis.precision_recall(index, 47, analysis.FeatureAnnotation("lang:non-en", positives))
print(f"latent 47 vs non-English files: precision {pr.precision:.2f} recall {pr.recall:.2f}")

# the word latent also passes a span-level check against its word's intervals
ann = analysis.annotation_from_word(alignments, "the")
strict = analysis.span_precision_recall(index, 0, ann, alignments, "word", lenient=False)
print("span-level, strict:", strict.to_record())

# when in the utterance does it fire?
ps = analysis.positional_stats(index, 0)
print(f"latent 0 fires at {ps.mean_time:.2f} s on average (sd {ps.sd_time:.2f} s, n={ps.n})")
