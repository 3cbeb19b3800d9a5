from fastapi import APIRouter, Depends, HTTPException, Query
from sqlalchemy.orm import Session
from typing import Optional, List
from datetime import datetime

from app.models.schemas import (
    HealthResponse, LayoutResponse, RunListResponse, RunRecordResponse, RunStatus, StrategyName, SuiteInfo
)
from app.database import get_db, RunRecord
from app.services.strategies import build_layout, default_lambda
from app.services.suites import SUITE_DESCRIPTIONS, suite_variants
from app.config import load_config

import logging

logger = logging.getLogger(__name__)

router = APIRouter()


def _to_response(record: RunRecord) -> RunRecordResponse:
    return RunRecordResponse(
        run_id=record.id,
        created_at=record.created_at,
        suite=record.suite,
        strategy=record.strategy,
        variant_param=record.variant_param,
        seed=record.seed,
        task=record.task,
        score=record.score,
        steps=record.steps,
        wall_clock_s=record.wall_clock_s,
        config_hash=record.config_hash,
        status=RunStatus(record.status),
        checkpoint_path=record.checkpoint_path,
        detail=record.detail
    )


@router.get("/health", response_model=HealthResponse, tags=["Health"])
async def health_check():
    """Check API health status"""
    return HealthResponse(
        status="healthy",
        timestamp=datetime.utcnow(),
        database="connected"
    )


@router.get("/v1/runs/{run_id}", response_model=RunRecordResponse, tags=["Runs"])
async def get_run(run_id: str, db: Session = Depends(get_db)):
    """Retrieve one registry record by ID"""
    record = db.query(RunRecord).filter(RunRecord.id == run_id).first()
    if not record:
        raise HTTPException(status_code=404, detail="Run not found")
    return _to_response(record)


@router.get("/v1/runs", response_model=RunListResponse, tags=["Runs"])
async def list_runs(
    suite: Optional[str] = Query(None, description="Filter by suite name"),
    strategy: Optional[StrategyName] = Query(None, description="Filter by strategy"),
    status: Optional[RunStatus] = Query(None, description="Filter by status"),
    limit: int = Query(default=10, ge=1, le=100, description="Number of results to return"),
    offset: int = Query(default=0, ge=0, description="Number of results to skip"),
    db: Session = Depends(get_db)
):
    """
    List registry records with optional filtering

    - **suite**: Filter by suite (placeholder, lambda, ...)
    - **strategy**: Filter by strategy variant
    - **status**: ok or failed
    - **limit**: Maximum number of results to return (1-100)
    - **offset**: Number of results to skip for pagination
    """
    query = db.query(RunRecord)

    if suite:
        query = query.filter(RunRecord.suite == suite)
    if strategy:
        query = query.filter(RunRecord.strategy == strategy.value)
    if status:
        query = query.filter(RunRecord.status == status.value)

    total = query.count()
    records = query.order_by(RunRecord.created_at.desc()).offset(offset).limit(limit).all()

    return RunListResponse(
        total=total,
        limit=limit,
        offset=offset,
        runs=[_to_response(r) for r in records]
    )


@router.get("/v1/layouts/{strategy}", response_model=LayoutResponse, tags=["Strategies"])
async def get_layout(
    strategy: StrategyName,
    horizon: int = Query(default=8, description="Action chunk length H"),
    tokens_per_step: int = Query(default=4, description="Image tokens per step P")
):
    """Placeholder layout and default latent loss weight for a strategy"""
    try:
        layout = build_layout(strategy, horizon, tokens_per_step)
    except ValueError as e:
        raise HTTPException(status_code=400, detail=str(e))
    return LayoutResponse(
        strategy=layout.strategy,
        horizon=layout.horizon,
        tokens_per_step=layout.tokens_per_step,
        latent_slots=layout.latent_slots,
        latent_width=layout.latent_width,
        action_slots=layout.action_slots,
        total_length=layout.total_length,
        default_lambda=default_lambda(strategy)
    )


@router.get("/v1/suites", response_model=List[SuiteInfo], tags=["Strategies"])
async def list_suites():
    """Ablation suites and the strategies each one trains"""
    try:
        config = load_config()
        suites = []
        for name, description in SUITE_DESCRIPTIONS.items():
            strategies = sorted({v.strategy.value for v in suite_variants(name.value, config)})
            suites.append(SuiteInfo(name=name.value, strategies=strategies, description=description))
        return suites
    except Exception as e:
        logger.error(f"Error listing suites: {e}", exc_info=True)
        raise HTTPException(status_code=500, detail=f"Listing suites failed: {str(e)}")
