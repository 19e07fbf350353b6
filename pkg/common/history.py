import csv
import json
import base64
import struct
from pathlib import Path

import numpy as np
import torch


ATTRIBUTION_COLUMNS = ['run_id', 'evaluator', 'client_id', 'raw', 'share', 'rank', 'phase']
DETECTION_COLUMNS = ['run_id', 'phase', 'precision', 'recall', 'f1', 'random_guess_f1', 'rounds']

_LENGTH = struct.Struct('<Q')


def pack_params(params):
    values = np.ascontiguousarray(params.detach().cpu().numpy(), dtype='<f8')
    return _LENGTH.pack(values.size) + values.tobytes()


def unpack_params(data):
    if len(data) < _LENGTH.size:
        raise ValueError('Parameter record is truncated.')
    (length,) = _LENGTH.unpack_from(data)
    if len(data) != _LENGTH.size + 8 * length:
        raise ValueError(f'Parameter record length mismatch: expected {length} values.')
    values = np.frombuffer(data, dtype='<f8', offset=_LENGTH.size, count=length)
    return torch.tensor(values, dtype=torch.float64)


def encode_params(params):
    return base64.b64encode(pack_params(params)).decode('ascii')


def decode_params(text):
    return unpack_params(base64.b64decode(text.encode('ascii'), validate=True))


def write_json(payload, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        json.dump(payload, f, indent=2, allow_nan=False)
        f.write('\n')


def read_json(path):
    with open(path, encoding='utf-8') as f:
        return json.load(f)


def write_jsonl(records, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n_lines = 0
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        for record in records:
            f.write(json.dumps(record, allow_nan=False))
            f.write('\n')
            n_lines += 1
    return n_lines


def read_jsonl(path):
    with open(path, encoding='utf-8') as f:
        return [json.loads(line) for line in f if line.strip()]


def write_csv(rows, columns, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(columns)
        for row in rows:
            writer.writerow([row[column] for column in columns])


def read_csv(path):
    with open(path, encoding='utf-8', newline='') as f:
        return list(csv.DictReader(f))


def attribution_rows(run_id, phase, report):
    for client_id, (raw, share, rank) in enumerate(zip(report.raw, report.shares, report.ranks)):
        yield {'run_id': run_id, 'evaluator': report.evaluator, 'client_id': client_id, 'raw': raw, 'share': share,
            'rank': rank, 'phase': phase}


def read_attribution_csv(path):
    rows = read_csv(path)
    converters = {'client_id': int, 'raw': float, 'share': float, 'rank': int}
    return [{k: converters.get(k, str)(v) for k, v in row.items()} for row in rows]
