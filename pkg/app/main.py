from datetime import datetime
from typing import Optional

from fastapi import FastAPI, File, Form, HTTPException, UploadFile
from fastapi.middleware.cors import CORSMiddleware

from app.errors import CertSimError
from app.models.models import CertifyResponse, DistanceResponse, RetrievalResponse
from app.services.metric_service import metric_service


app = FastAPI(
    title="CertSim - Certified Perceptual Similarity",
    description="1-Lipschitz perceptual metric with certified 2AFC decisions",
    version="1.0.0",
)

origins = [
    "http://localhost:5173",
    "http://localhost:3000",
]

app.add_middleware(
    CORSMiddleware,
    allow_origins=origins,
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


async def _read_image(file: UploadFile) -> bytes:
    if not (file.content_type or "").startswith("image/"):
        raise HTTPException(status_code=400, detail=f"File {file.filename!r} must be an image")
    return await file.read()


@app.get("/")
async def read_root():
    return {
        "name": "CertSim - Certified Perceptual Similarity API",
        "version": "1.0.0",
        "endpoints": [
            "/health",
            "/distance",
            "/certify",
            "/retrieve",
        ],
    }


@app.get("/health")
async def health_check():
    return {
        "status": "healthy" if metric_service.model is not None else "degraded",
        "model": metric_service.get_model_info(),
        "timestamp": datetime.now(),
    }


@app.post("/distance", response_model=DistanceResponse)
async def compare_images(
    image_a: UploadFile = File(...),
    image_b: UploadFile = File(...),
):
    a = await _read_image(image_a)
    b = await _read_image(image_b)
    try:
        return metric_service.distance(a, b)
    except CertSimError as e:
        raise HTTPException(status_code=400, detail=str(e))
    except Exception as e:
        raise HTTPException(status_code=500, detail=f"Distance error: {str(e)}")


@app.post("/certify", response_model=CertifyResponse)
async def certify_triplet(
    reference: UploadFile = File(...),
    x0: UploadFile = File(...),
    x1: UploadFile = File(...),
    label: Optional[int] = Form(None),
):
    """2AFC decision for (reference, x0, x1) with its certified radius.

    Without ``label`` the certificate is issued for the model's own decision.
    """
    if label is not None and label not in (0, 1):
        raise HTTPException(status_code=400, detail="label must be 0 or 1")
    images = [await _read_image(f) for f in (reference, x0, x1)]
    try:
        return metric_service.certify(*images, label=label)
    except CertSimError as e:
        raise HTTPException(status_code=400, detail=str(e))
    except Exception as e:
        raise HTTPException(status_code=500, detail=f"Certification error: {str(e)}")


@app.post("/retrieve", response_model=RetrievalResponse)
async def retrieve_neighbors(
    query: UploadFile = File(...),
    topk: int = Form(5),
):
    image = await _read_image(query)
    try:
        return metric_service.retrieve(image, topk)
    except CertSimError as e:
        raise HTTPException(status_code=400, detail=str(e))
    except Exception as e:
        raise HTTPException(status_code=500, detail=f"Retrieval error: {str(e)}")
