# ledger.py
# Append-only SQLite history of CLI runs and search trials

import json
import logging
import sqlite3
from datetime import datetime, timezone

import pandas as pd

from chronoweft import settings

logger = logging.getLogger(__name__)


def create_db(conn):
    """Create the runs and trials tables if they don't exist"""
    conn.execute("""
    CREATE TABLE IF NOT EXISTS runs (
        id INTEGER PRIMARY KEY AUTOINCREMENT,
        created_at TEXT,
        verb TEXT,
        config_hash TEXT,
        seed INTEGER,
        tool_version TEXT,
        status TEXT,
        output TEXT,
        config_json TEXT
    );
    """)
    conn.execute("""
    CREATE TABLE IF NOT EXISTS trials (
        id INTEGER PRIMARY KEY AUTOINCREMENT,
        run_id INTEGER REFERENCES runs(id),
        trial INTEGER,
        seed INTEGER,
        objective REAL,
        failed INTEGER,
        seconds REAL,
        config_json TEXT
    );
    """)
    conn.commit()


def _connect(db):
    conn = sqlite3.connect(str(db))
    create_db(conn)
    return conn


def record_run(verb, config, config_hash, seed, output="", status="ok", db=None):
    """Append one run row; returns its id"""
    conn = _connect(db or settings.LEDGER_FILE)
    try:
        cur = conn.execute("""
            INSERT INTO runs (created_at, verb, config_hash, seed, tool_version, status, output, config_json)
            VALUES (?, ?, ?, ?, ?, ?, ?, ?)
        """, (
            datetime.now(timezone.utc).isoformat(), verb, config_hash, int(seed),
            settings.TOOL_VERSION, status, str(output), json.dumps(config, sort_keys=True, default=str),
        ))
        conn.commit()
        run_id = cur.lastrowid
    finally:
        conn.close()
    logger.debug("Ledger: run %d (%s, %s)", run_id, verb, config_hash)
    return run_id


def record_trials(run_id, history, db=None):
    conn = _connect(db or settings.LEDGER_FILE)
    try:
        conn.executemany("""
            INSERT INTO trials (run_id, trial, seed, objective, failed, seconds, config_json)
            VALUES (?, ?, ?, ?, ?, ?, ?)
        """, [
            (run_id, r.index, r.seed, r.objective, int(r.failed), r.seconds,
             json.dumps(r.config, sort_keys=True, default=str))
            for r in history
        ])
        conn.commit()
    finally:
        conn.close()
    return len(history)


def read_runs(db=None, limit=20):
    """Latest runs first, as a DataFrame"""
    conn = _connect(db or settings.LEDGER_FILE)
    try:
        return pd.read_sql_query(
            "SELECT * FROM runs ORDER BY id DESC LIMIT ?", conn, params=(int(limit),)
        )
    finally:
        conn.close()


def read_trials(run_id, db=None):
    conn = _connect(db or settings.LEDGER_FILE)
    try:
        return pd.read_sql_query(
            "SELECT * FROM trials WHERE run_id = ? ORDER BY trial ASC", conn, params=(int(run_id),)
        )
    finally:
        conn.close()
