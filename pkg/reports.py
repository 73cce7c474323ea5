"""Text tables and JSON writers for evaluation reports."""
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Union

import numpy as np
import pandas as pd

from metrics import BUCKETS, EvalReport

logger = logging.getLogger(__name__)


def _format(value: float) -> str:
    return f'{value:.2f}'


def _render(frame: pd.DataFrame) -> str:
    return frame.to_string(na_rep='-', float_format=_format) + '\n'


def bucket_table(reports: Mapping[str, EvalReport]) -> str:
    """Mean score per overlap bucket (in %) and overall, one row per system."""
    rows = {}
    for system, report in reports.items():
        means = report.bucket_means()
        row = {b: means[b]['mean'] for b in BUCKETS}
        row['Average'] = report.mean
        rows[system] = row
    frame = pd.DataFrame.from_dict(rows, orient='index', columns=list(BUCKETS) + ['Average'])
    frame = frame.astype(float)
    frame.index.name = 'System'
    return _render(frame)


def bucket_counts(report: EvalReport) -> str:
    means = report.bucket_means()
    frame = pd.DataFrame([{b: means[b]['count'] for b in BUCKETS}], index=['segments'])
    return _render(frame)


def utterance_table(reports: Mapping[str, EvalReport]) -> str:
    """Utterance-level scores, one row per system."""
    rows = []
    for system, report in reports.items():
        rows.append({
            'System': system,
            'Utterances': len(report.items),
            f'{report.metric} (dB)': report.mean,
        })
    frame = pd.DataFrame(rows).set_index('System')
    return _render(frame)


def sweep_table(rows: List[Dict[str, Any]]) -> str:
    """Cluster-count sweep: mean utterance and segment scores per M over successful runs."""
    if not rows:
        return 'no runs\n'
    frame = pd.DataFrame(rows)
    ok = frame[frame['status'] == 'ok']
    failed = frame[frame['status'] != 'ok'].groupby('n_clusters').size()
    summary = ok.groupby('n_clusters').agg(
        runs=('mean_utterance', 'size'),
        utterance=('mean_utterance', 'mean'),
        segment=('mean_segment', 'mean'),
    ) if not ok.empty else pd.DataFrame(columns=['runs', 'utterance', 'segment'])
    all_m = sorted(frame['n_clusters'].unique())
    summary = summary.reindex(all_m)
    summary['runs'] = summary['runs'].fillna(0).astype(int)
    summary['failed'] = failed.reindex(all_m).fillna(0).astype(int)
    summary.index.name = 'M'
    text = _render(summary)
    spread = sweep_spread(rows)
    if spread is not None:
        text += f'spread of mean utterance score across M: {spread:.2f} dB\n'
    return text


def sweep_spread(rows: List[Dict[str, Any]]) -> Optional[float]:
    """Max minus min of the per-M mean utterance score over successful runs."""
    means: Dict[int, List[float]] = {}
    for row in rows:
        if row['status'] == 'ok' and row['mean_utterance'] is not None:
            means.setdefault(row['n_clusters'], []).append(row['mean_utterance'])
    if len(means) < 2:
        return None
    per_m = [float(np.mean(v)) for v in means.values()]
    return max(per_m) - min(per_m)


def purity_table(clusters: List[Dict[str, Any]]) -> str:
    if not clusters:
        return 'no clustered inventory\n'
    frame = pd.DataFrame(clusters).set_index('cluster')
    return _render(frame)


def dumps(data: Any) -> str:
    return json.dumps(data, sort_keys=True, indent=2) + '\n'


def write_json(path: Union[str, Path], data: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(data), encoding='utf-8')
    return path


def write_text(path: Union[str, Path], text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding='utf-8')
    logger.debug(f"Wrote {path}")
    return path
