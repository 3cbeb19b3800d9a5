from fastapi import FastAPI
from app.routes import router
from app.database import DATABASE_URL, init_db
from app.models.schemas import StrategyName, SuiteName
import logging

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

__version__ = "0.3.0"

TAGS = [
    {"name": "Health", "description": "Service and registry status"},
    {"name": "Runs", "description": "Training, evaluation and suite rows recorded by the CLI"},
    {"name": "Strategies", "description": "Placeholder layouts, default latent weights and ablation suites"},
]

app = FastAPI(
    title="Latent Action Bench",
    description="Read-only registry for latent action supervision experiments: policy runs trained with "
                "image or action latent targets, their placeholder layouts and the ablation suites that "
                "produced them. Runs are written by `python -m app.cli`; this API never trains.",
    version=__version__,
    openapi_tags=TAGS,
)


# Initialize the run registry on startup
@app.on_event("startup")
async def startup_event():
    init_db()
    logger.info(f"Latent Action Bench {__version__}: run registry at {DATABASE_URL}")
    logger.info(f"Serving {len(StrategyName)} strategies and {len(SuiteName) - 1} ablation suites")

app.include_router(router)
