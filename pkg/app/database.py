from sqlalchemy import create_engine, Column, String, DateTime, Float, Integer, JSON
from sqlalchemy.orm import declarative_base, sessionmaker
from datetime import datetime
import uuid

from app.config import database_url

DATABASE_URL = database_url()

engine = create_engine(DATABASE_URL, connect_args={"check_same_thread": False})
SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=engine)
Base = declarative_base()


class RunRecord(Base):
    __tablename__ = "runs"

    id = Column(String, primary_key=True, default=lambda: str(uuid.uuid4()))
    created_at = Column(DateTime, default=datetime.utcnow, nullable=False)
    suite = Column(String, nullable=True, index=True)  # None for single train/evaluate runs
    strategy = Column(String, nullable=False, index=True)
    variant_param = Column(String, nullable=True)
    seed = Column(Integer, nullable=False)
    task = Column(String, nullable=True)
    score = Column(Float, nullable=True)
    steps = Column(Integer, nullable=False, default=0)
    wall_clock_s = Column(Float, nullable=True)
    config_hash = Column(String, nullable=False)
    status = Column(String, nullable=False, default="ok")  # ok or failed
    checkpoint_path = Column(String, nullable=True)
    detail = Column(JSON, nullable=True)


def init_db(bind=None):
    """Create the registry tables"""
    Base.metadata.create_all(bind=bind or engine)


def get_db():
    """Get database session"""
    db = SessionLocal()
    try:
        yield db
    finally:
        db.close()


def record_runs(session_factory, rows):
    """Insert registry rows (dicts of RunRecord columns) in one transaction."""
    db = session_factory()
    try:
        for row in rows:
            db.add(RunRecord(**row))
        db.commit()
    finally:
        db.close()
