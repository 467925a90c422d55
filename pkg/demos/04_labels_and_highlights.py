"""
Labeling latents and rendering highlights
=========================================

Example transcripts get the characters spoken while a latent was active
wrapped in asterisks. A chat model labels the latent from them; here a mock
client stands in so the results are reproducible offline.
"""
import numpy as np

from speechsae import analysis, autolabel, report, synthbench
from speechsae.ingest import EmbeddingSequence
from speechsae.sae import SaeParams

d = synthbench.make_dictionary(d_in=16, n_atoms=48, sparsity=3, seed=7)
corpus = synthbench.generate(d, n_files=30, frames_per_file=150, n_word_atoms=3)
atoms = d.atoms
params = SaeParams(atoms.T.copy(), np.zeros(48, np.float32), atoms.copy(), np.zeros(16, np.float32))
index = analysis.build_index([EmbeddingSequence(f.file_id, f.frames) for f in corpus.files], params, k=3)
transcripts = {f.file_id: f.transcript for f in corpus.files}
alignments = {f.file_id: f.alignment for f in corpus.files}

# latent 0 is locked to the word "the"
fid = next(f.file_id for f in corpus.files if "word:the" in f.tags)
print(autolabel.mark_spans(transcripts[fid], alignments[fid], index.active_frames(0, fid)))

records = autolabel.label_latents(range(6), index, transcripts, alignments, autolabel.MockChatClient(), seed=0)
for r in records:
    print(f"latent {r.latent_id}: {r.confidence:6s} {r.category:12s} retained={r.retained}  {r.label}")

# the strongest files for latent 0, as plain text and as colored HTML
files = report.top_files(index, 0, 3)
for doc in report.highlight_docs(index, 0, files, transcripts, alignments):
    print(report.render_plain(doc))
html = report.render_highlight(report.highlight_docs(index, 0, files[:1], transcripts, alignments)[0])
print(html[:120], "...")
