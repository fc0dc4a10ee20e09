"""
One screened call
=================

Issue a challenge, answer it with a bona fide clip and with a late
response, and print what each module thought. Uses models produced by
``python -m dcaptcha train --out runs/demo``.
"""

import sys
from pathlib import Path

from dcaptcha.corpus import SyntheticCorpusSpec, generate
from dcaptcha.models import load_checkpoint
from dcaptcha.pipeline import PipelineConfig, issue_challenge, verify_response

out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/demo")
realism = load_checkpoint(out / "models" / "det_lfcc_mlp.ckpt")
tasks = load_checkpoint(out / "models" / "cls_spec_conv.ckpt")
pipe = PipelineConfig.from_classifier(realism, tasks)

challenge = issue_challenge(seed=4)
print("challenge:", challenge.task_kind)

# a fresh synthetic speaker answering the challenge
corpus = generate(SyntheticCorpusSpec(n_per_task=10, duration_s=1.0), seed=99)
greeting = corpus.select(task="speak_emotion", fake=False)[0]
answer = [c for c in corpus.select(task=challenge.task_kind, fake=False)
          if c.speaker == greeting.speaker] or corpus.select(task=challenge.task_kind, fake=False)

for elapsed in (0.6, 2.0):
    s = verify_response(greeting.buffer(), challenge, answer[0].buffer(), elapsed, pipe)
    print(f"elapsed {elapsed}s ->", s.final, {m: v.passed for m, v in s.verdicts.items()})

# the same check over every bona fide answer in the fresh corpus
verdicts = [verify_response(greeting.buffer(), challenge, c.buffer(), 0.6, pipe).final
            for c in corpus.select(task=challenge.task_kind, fake=False)]
print(f"{verdicts.count('accept')}/{len(verdicts)} bona fide answers accepted")
