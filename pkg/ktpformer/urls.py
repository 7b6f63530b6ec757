from django.urls import path

from .views.api_views import api_run_detail, api_runs

app_name = 'ktpformer'

urlpatterns = [
    path('api/runs/', api_runs, name='api_runs'),
    path('api/runs/<int:run_id>/', api_run_detail, name='api_run_detail'),
]
