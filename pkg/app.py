import os
import time

import numpy as np
import structlog
from flask import Flask, jsonify, request

from bwta_engine import BwtaError, get_default_config
from bwta_engine.checkpoint import load_checkpoint
from metrics import MetricsCollector

logger = structlog.get_logger(__name__)


def create_app(checkpoint_dir: str = None) -> Flask:
    app = Flask(__name__)
    app.config['CHECKPOINT_DIR'] = checkpoint_dir or os.environ.get(
        'BWTA_CHECKPOINT', get_default_config()['checkpoint_dir']
    )
    metrics = MetricsCollector()
    holder = {'model': None}

    def reload_model():
        holder['model'] = load_checkpoint(app.config['CHECKPOINT_DIR'])
        metrics.record_checkpoint_reload()

    try:
        reload_model()
    except (BwtaError, FileNotFoundError) as e:
        metrics.record_checkpoint_error()
        logger.warning("starting without a model", checkpoint=app.config['CHECKPOINT_DIR'], error=str(e))

    @app.route('/infer', methods=['POST'])
    def infer():
        start_time = time.time()
        model = holder['model']
        if model is None:
            return jsonify({"error": "No checkpoint loaded"}), 503

        data = request.get_json(silent=True)
        if not data or 'inputs' not in data:
            metrics.record_validation_error()
            return jsonify({"error": "Missing 'inputs' in request"}), 400

        try:
            batch = np.asarray(data['inputs'], dtype=np.float32)
        except (TypeError, ValueError):
            metrics.record_validation_error()
            return jsonify({"error": "'inputs' must be a numeric [batch x seq_len x d_in] array"}), 400
        if batch.ndim != 3 or batch.shape[2] != model.d_in or 0 in batch.shape:
            metrics.record_validation_error()
            return jsonify({"error": f"'inputs' must have shape [batch x seq_len x {model.d_in}]"}), 400

        quantized = bool(data.get('quantized', True))
        try:
            logits = model.forward_batch(batch, quantized=quantized)
        except BwtaError as e:
            metrics.record_inference_error()
            return jsonify({"error": str(e)}), 400

        latency_ms = (time.time() - start_time) * 1000
        metrics.record_inference(latency_ms, sequences=batch.shape[0], tokens=batch.shape[0] * batch.shape[1])
        return jsonify({
            "logits": logits.tolist(),
            "predictions": logits.argmax(axis=1).tolist(),
            "stage_L": model.stage_L,
            "quantized": quantized
        }), 200

    @app.route('/reload_checkpoint', methods=['POST'])
    def reload_checkpoint():
        data = request.get_json(silent=True) or {}
        if 'checkpoint_dir' in data:
            app.config['CHECKPOINT_DIR'] = data['checkpoint_dir']
        try:
            reload_model()
        except (BwtaError, FileNotFoundError) as e:
            metrics.record_checkpoint_error()
            return jsonify({"error": str(e)}), 400
        logger.info("checkpoint reloaded via /reload_checkpoint", checkpoint=app.config['CHECKPOINT_DIR'])
        return jsonify({"status": "Checkpoint reloaded successfully"}), 200

    @app.route('/metrics', methods=['GET'])
    def get_metrics():
        return jsonify(metrics.get_metrics()), 200

    @app.route('/', methods=['GET'])
    def index():
        model = holder['model']
        return jsonify({
            "message": "BWTA inference service is running.",
            "checkpoint": app.config['CHECKPOINT_DIR'],
            "model_loaded": model is not None,
            "endpoints": ["/infer (POST)", "/reload_checkpoint (POST)", "/metrics (GET)"]
        }), 200

    app.extensions['bwta_metrics'] = metrics
    return app


app = create_app()

if __name__ == '__main__':
    app.run(debug=True)
