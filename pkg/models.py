"""
Database models for the experiment run registry
"""
from datetime import datetime

from sqlalchemy import Column, DateTime, Float, ForeignKey, Integer, String, Text
from sqlalchemy.orm import declarative_base, relationship

Base = declarative_base()


class ExperimentRun(Base):
    """One evaluated pipeline run"""
    __tablename__ = 'experiment_runs'

    id = Column(Integer, primary_key=True)
    name = Column(String(100), nullable=False, index=True)
    created_at = Column(DateTime, default=datetime.now)
    output_dir = Column(String(500))
    config_json = Column(Text, nullable=False)
    summary_json = Column(Text)  # per-method summary statistics
    num_test_samples = Column(Integer)

    # Relationships
    samples = relationship('SampleResult', back_populates='run', cascade='all, delete-orphan')
    epochs = relationship('TrainingEpoch', back_populates='run', cascade='all, delete-orphan')

    def __repr__(self):
        return f"<ExperimentRun(id={self.id}, name={self.name})>"


class SampleResult(Base):
    """NSE of one method on one held-out sample"""
    __tablename__ = 'sample_results'

    id = Column(Integer, primary_key=True)
    run_id = Column(Integer, ForeignKey('experiment_runs.id'), nullable=False, index=True)
    sample_id = Column(Integer, nullable=False)
    dataset = Column(Integer, nullable=False)
    num_paths = Column(Integer, nullable=False)
    method = Column(String(40), nullable=False)  # 'cGAN', 'cGAN+LSTM', 'ESPRIT-3MPC', ...
    nse = Column(Float, nullable=False)

    run = relationship('ExperimentRun', back_populates='samples')

    def __repr__(self):
        return f"<SampleResult(run={self.run_id}, sample={self.sample_id}, {self.method}={self.nse:.4g})>"


class TrainingEpoch(Base):
    """One row of a training history"""
    __tablename__ = 'training_epochs'

    id = Column(Integer, primary_key=True)
    run_id = Column(Integer, ForeignKey('experiment_runs.id'), nullable=False, index=True)
    network = Column(String(20), nullable=False)  # 'cgan' or 'lstm'
    epoch = Column(Integer, nullable=False)
    metrics_json = Column(Text, nullable=False)

    run = relationship('ExperimentRun', back_populates='epochs')

    def __repr__(self):
        return f"<TrainingEpoch(run={self.run_id}, {self.network} epoch {self.epoch})>"
