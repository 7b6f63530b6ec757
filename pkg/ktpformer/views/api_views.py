from typing import Any, Dict

from django.core.paginator import Paginator
from django.http import HttpRequest, JsonResponse
from django.shortcuts import get_object_or_404
from django.views.decorators.http import require_GET

from ..models import ExperimentRun, MetricRecord


def serialize_run(run: ExperimentRun) -> Dict[str, Any]:
    return {
        'id': run.id,
        'name': run.name,
        'mode': run.mode,
        'kpa_variant': run.kpa_variant,
        'tpa_variant': run.tpa_variant,
        'seed': run.seed,
        'status': run.status,
        'checkpoint_path': run.checkpoint_path,
        'parameter_count': run.parameter_count,
        'flop_count': run.flop_count,
        'steps': run.steps,
        'final_loss': run.final_loss,
        'duration_seconds': run.duration_seconds,
        'error_message': run.error_message,
        'created_at': run.created_at.isoformat(),
    }


def serialize_metric(record: MetricRecord) -> Dict[str, Any]:
    return {
        'clip_name': record.clip_name,
        'metric': record.metric,
        'value': record.value,
    }


@require_GET
def api_runs(request: HttpRequest) -> JsonResponse:
    """
    JSON listing of experiment runs, newest first.

    Query Parameters:
        - status: running, completed or failed
        - mode: UMD, PMD, SMD-S, SMD or BASELINE
        - page: Page number (default: 1)
        - per_page: Results per page (default: 20, max: 100)
    """
    runs = ExperimentRun.objects.all()
    filters = {}
    for key in ('status', 'mode'):
        value = request.GET.get(key, '').strip()
        if value:
            runs = runs.filter(**{key: value})
            filters[key] = value

    try:
        per_page = min(max(int(request.GET.get('per_page', 20)), 1), 100)
    except ValueError:
        return JsonResponse({'error': 'per_page must be an integer'}, status=400)
    paginator = Paginator(runs, per_page)
    page_obj = paginator.get_page(request.GET.get('page', 1))

    return JsonResponse({
        'results': [serialize_run(run) for run in page_obj],
        'pagination': {
            'page': page_obj.number,
            'per_page': per_page,
            'total_pages': paginator.num_pages,
            'total_count': paginator.count,
            'has_previous': page_obj.has_previous(),
            'has_next': page_obj.has_next(),
        },
        'filters_applied': filters,
    })


@require_GET
def api_run_detail(request: HttpRequest, run_id: int) -> JsonResponse:
    """One run with its configuration text and every recorded metric."""
    run = get_object_or_404(ExperimentRun, id=run_id)
    payload = serialize_run(run)
    payload['config_text'] = run.config_text
    payload['metrics'] = [serialize_metric(record) for record in run.metrics.all()]
    return JsonResponse(payload)
