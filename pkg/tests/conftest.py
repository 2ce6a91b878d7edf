import sys
from dataclasses import dataclass
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

import graphgen  # noqa: E402
from convshrink import CollapseError, CollapseReport, ShrinkReport, ShrunkGraph, shrink_pipeline  # noqa: E402

CORPUS_SIZE = 200


@dataclass
class PipelineRecord:
    entry: graphgen.CorpusEntry
    result: ShrunkGraph | None
    report: ShrinkReport | None
    collapse: CollapseReport | None


@pytest.fixture(scope="session")
def corpus_entries() -> list[graphgen.CorpusEntry]:
    return graphgen.corpus(CORPUS_SIZE)


@pytest.fixture(scope="session")
def pipeline_records(corpus_entries) -> list[PipelineRecord]:
    records = []
    for e in corpus_entries:
        try:
            res, rep = shrink_pipeline(e.graph, e.mask)
            records.append(PipelineRecord(e, res, rep, None))
        except CollapseError as ex:
            records.append(PipelineRecord(e, None, None, ex.report))
    return records
