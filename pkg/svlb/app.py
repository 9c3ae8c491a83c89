from __future__ import annotations
from typing import Optional

from dotenv import load_dotenv
from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

from svlb.routes import get_runs_dir, router as svlb_router
from svlb.storage import BASE

load_dotenv()


def create_app(runs_dir: Optional[str] = None) -> FastAPI:
    """Read-only service over the run directories under runs_dir (default SVLB_RUNS_DIR)."""
    app = FastAPI(title="svlb", version="0.1.0")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["GET", "POST"],
        allow_headers=["*"],
    )
    root = runs_dir or BASE
    app.dependency_overrides[get_runs_dir] = lambda: root
    app.include_router(svlb_router)

    @app.get("/")
    def index():
        return {"message": "svlb is running", "docs": "/docs", "health": "/svlb/health"}

    return app


app = create_app()

if __name__ == "__main__":
    import uvicorn
    uvicorn.run(app, host="127.0.0.1", port=8000)
