import logging
import os
import sqlite3
from contextlib import contextmanager
from datetime import datetime


logger = logging.getLogger(__name__)

METRIC_FIELDS = ("success_rate", "ttf", "reward", "distance", "adaptation_samples", "torque", "smoothness",
                 "ground_impact", "episodes")


def get_database_path():
    """Registry location: RMA_RUNS_DB, or databases/runs.db next to the working directory."""
    path = os.environ.get("RMA_RUNS_DB")
    if path:
        directory = os.path.dirname(os.path.abspath(path))
    else:
        directory = "databases"
        path = os.path.join(directory, "runs.db")
    os.makedirs(directory, exist_ok=True)
    return path


@contextmanager
def get_db(path=None):
    """Get a registry connection with row access by column name."""
    conn = sqlite3.connect(path or get_database_path())
    conn.row_factory = sqlite3.Row
    try:
        yield conn
    finally:
        conn.close()


def init_database(path=None):
    """Initialize registry schema."""
    with get_db(path) as conn:
        cursor = conn.cursor()

        cursor.execute("""
            CREATE TABLE IF NOT EXISTS runs (
                run_dir TEXT PRIMARY KEY,
                command TEXT NOT NULL,
                kind TEXT,
                seed INTEGER,
                preset TEXT,
                status TEXT DEFAULT 'running',
                created_at TEXT
            )
        """)

        cursor.execute("""
            CREATE TABLE IF NOT EXISTS run_config (
                run_dir TEXT NOT NULL,
                key TEXT NOT NULL,
                value TEXT NOT NULL,
                PRIMARY KEY (run_dir, key)
            )
        """)

        cursor.execute("""
            CREATE TABLE IF NOT EXISTS metrics (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                run_dir TEXT NOT NULL,
                scope TEXT NOT NULL,
                kind TEXT NOT NULL,
                policy_seed INTEGER,
                eval_seed INTEGER,
                parameter TEXT,
                value REAL,
                success_rate REAL,
                ttf REAL,
                reward REAL,
                distance REAL,
                adaptation_samples REAL,
                torque REAL,
                smoothness REAL,
                ground_impact REAL,
                episodes INTEGER
            )
        """)

        conn.commit()
    logger.debug("[DB] Registry schema ready")


def register_run(run_dir, command, seed, preset, kind=None, path=None):
    with get_db(path) as conn:
        conn.execute("""
            INSERT INTO runs (run_dir, command, kind, seed, preset, status, created_at)
            VALUES (?, ?, ?, ?, ?, 'running', ?)
            ON CONFLICT(run_dir) DO UPDATE SET command = excluded.command, kind = excluded.kind,
                seed = excluded.seed, preset = excluded.preset, status = 'running'
        """, (run_dir, command, kind, seed, preset, datetime.now().isoformat(timespec="seconds")))
        conn.commit()


def set_run_status(run_dir, status, path=None):
    with get_db(path) as conn:
        conn.execute("UPDATE runs SET status = ? WHERE run_dir = ?", (status, run_dir))
        conn.commit()


def get_run(run_dir, path=None):
    with get_db(path) as conn:
        row = conn.execute("SELECT * FROM runs WHERE run_dir = ?", (run_dir,)).fetchone()
        return dict(row) if row else None


def save_run_config(run_dir, values, path=None):
    with get_db(path) as conn:
        conn.executemany("""
            INSERT INTO run_config (run_dir, key, value) VALUES (?, ?, ?)
            ON CONFLICT(run_dir, key) DO UPDATE SET value = excluded.value
        """, [(run_dir, key, str(value)) for key, value in values.items()])
        conn.commit()


def get_run_config(run_dir, path=None):
    with get_db(path) as conn:
        rows = conn.execute("SELECT key, value FROM run_config WHERE run_dir = ? ORDER BY key", (run_dir,)).fetchall()
        return {row["key"]: row["value"] for row in rows}


def save_metrics(run_dir, scope, kind, report, policy_seed=None, parameter=None, value=None, path=None):
    """Store one MetricsReport-like mapping."""
    row = report if isinstance(report, dict) else report.as_row()
    with get_db(path) as conn:
        conn.execute(f"""
            INSERT INTO metrics (run_dir, scope, kind, policy_seed, eval_seed, parameter, value,
                                 {', '.join(METRIC_FIELDS)})
            VALUES (?, ?, ?, ?, ?, ?, ?, {', '.join('?' for _ in METRIC_FIELDS)})
        """, (run_dir, scope, kind, policy_seed, row.get("seed"), parameter, value,
              *[row[name] for name in METRIC_FIELDS]))
        conn.commit()


def get_metrics(scope="evaluate", kinds=None, run_dirs=None, path=None):
    query = "SELECT * FROM metrics WHERE scope = ?"
    params = [scope]
    if kinds:
        query += f" AND kind IN ({', '.join('?' for _ in kinds)})"
        params.extend(kinds)
    if run_dirs:
        query += f" AND run_dir IN ({', '.join('?' for _ in run_dirs)})"
        params.extend(run_dirs)
    with get_db(path) as conn:
        return [dict(row) for row in conn.execute(query + " ORDER BY id", params).fetchall()]
