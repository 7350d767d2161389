"""
Run registry on SQLite: experiments, per-sample NSE and training histories
"""
import json
import logging
import math
import os
from typing import Any, Dict, List, Optional

import pandas as pd
from sqlalchemy import create_engine
from sqlalchemy.orm import Session, sessionmaker

from models import Base, ExperimentRun, SampleResult, TrainingEpoch

logger = logging.getLogger(__name__)

ID_COLUMNS = ["sample_id", "dataset", "num_paths"]


def _json_safe(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


class ResultsStore:
    """Manages all run registry operations"""

    def __init__(self, db_path: Optional[str] = None):
        if db_path is None:
            db_path = os.path.join(os.path.dirname(__file__), 'results.db')

        self.db_path = db_path
        self.engine = create_engine(f'sqlite:///{db_path}', echo=False)
        self.SessionLocal = sessionmaker(bind=self.engine)

        # Create tables if they don't exist
        Base.metadata.create_all(self.engine)

    def get_session(self) -> Session:
        """Get a new database session"""
        return self.SessionLocal()

    def record_run(self, name: str, config: Dict[str, Any], per_sample: pd.DataFrame,
                   summary: Dict[str, Dict[str, Any]], histories: Optional[Dict[str, pd.DataFrame]] = None,
                   output_dir: Optional[str] = None) -> int:
        """
        Store one run. `per_sample` is the wide NSE table (id columns plus one
        column per method); missing entries (NaN) are skipped.
        """
        session = self.get_session()
        try:
            run = ExperimentRun(
                name=name,
                output_dir=output_dir,
                config_json=json.dumps(config, sort_keys=True),
                summary_json=json.dumps(summary, sort_keys=True),
                num_test_samples=len(per_sample),
            )
            methods = [c for c in per_sample.columns if c not in ID_COLUMNS]
            for record in per_sample.to_dict(orient="records"):
                for method in methods:
                    if pd.isna(record[method]):
                        continue
                    run.samples.append(SampleResult(
                        sample_id=int(record["sample_id"]), dataset=int(record["dataset"]),
                        num_paths=int(record["num_paths"]), method=method, nse=float(record[method])))
            for network, history in (histories or {}).items():
                for record in history.to_dict(orient="records"):
                    metrics = {k: _json_safe(float(v)) for k, v in record.items() if k != "epoch"}
                    run.epochs.append(TrainingEpoch(network=network, epoch=int(record["epoch"]),
                                                    metrics_json=json.dumps(metrics, sort_keys=True)))
            session.add(run)
            session.commit()
            logger.info("Recorded run %s as #%d in %s", name, run.id, self.db_path)
            return run.id
        finally:
            session.close()

    def list_runs(self, name: Optional[str] = None) -> List[Dict[str, Any]]:
        session = self.get_session()
        try:
            query = session.query(ExperimentRun)
            if name:
                query = query.filter(ExperimentRun.name == name)
            return [{
                "id": run.id,
                "name": run.name,
                "created_at": run.created_at.isoformat(),
                "output_dir": run.output_dir,
                "num_test_samples": run.num_test_samples,
                "summary": json.loads(run.summary_json) if run.summary_json else {},
            } for run in query.order_by(ExperimentRun.id).all()]
        finally:
            session.close()

    def get_config(self, run_id: int) -> Dict[str, Any]:
        session = self.get_session()
        try:
            run = session.get(ExperimentRun, run_id)
            if run is None:
                raise ValueError(f"Run {run_id} not found")
            return json.loads(run.config_json)
        finally:
            session.close()

    def get_sample_results(self, run_id: int, method: Optional[str] = None) -> pd.DataFrame:
        """Long table (sample_id, dataset, num_paths, method, nse)"""
        session = self.get_session()
        try:
            query = session.query(SampleResult).filter(SampleResult.run_id == run_id)
            if method:
                query = query.filter(SampleResult.method == method)
            rows = [{"sample_id": r.sample_id, "dataset": r.dataset, "num_paths": r.num_paths,
                     "method": r.method, "nse": r.nse}
                    for r in query.order_by(SampleResult.sample_id, SampleResult.id).all()]
            return pd.DataFrame(rows, columns=ID_COLUMNS + ["method", "nse"])
        finally:
            session.close()

    def get_training_history(self, run_id: int, network: str) -> pd.DataFrame:
        session = self.get_session()
        try:
            epochs = (session.query(TrainingEpoch)
                      .filter(TrainingEpoch.run_id == run_id, TrainingEpoch.network == network)
                      .order_by(TrainingEpoch.epoch).all())
            return pd.DataFrame([{"epoch": e.epoch, **json.loads(e.metrics_json)} for e in epochs])
        finally:
            session.close()

    def delete_run(self, run_id: int) -> bool:
        session = self.get_session()
        try:
            run = session.get(ExperimentRun, run_id)
            if run is None:
                return False
            session.delete(run)
            session.commit()
            return True
        finally:
            session.close()
