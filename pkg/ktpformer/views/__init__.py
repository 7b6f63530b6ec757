from .api_views import api_run_detail, api_runs

__all__ = [
    'api_runs',
    'api_run_detail',
]
