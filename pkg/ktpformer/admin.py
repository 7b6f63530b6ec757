from django.contrib import admin

from .models import ExperimentRun, MetricRecord


class ReadOnlyAdminMixin:
    """Mixin to make admin interfaces read-only"""

    def has_add_permission(self, request, obj=None):
        return False

    def has_change_permission(self, request, obj=None):
        return False

    def has_delete_permission(self, request, obj=None):
        return False


class MetricRecordInline(ReadOnlyAdminMixin, admin.TabularInline):
    model = MetricRecord
    extra = 0
    can_delete = False
    fields = ['clip_name', 'metric', 'value', 'created_at']
    readonly_fields = fields


@admin.register(ExperimentRun)
class ExperimentRunAdmin(ReadOnlyAdminMixin, admin.ModelAdmin):
    list_display = ['id', 'name', 'mode', 'kpa_variant', 'tpa_variant', 'status', 'steps',
                    'final_loss', 'parameter_count', 'created_at']
    list_filter = ['status', 'mode', 'kpa_variant', 'tpa_variant']
    search_fields = ['name', 'checkpoint_path']
    readonly_fields = ['created_at']
    inlines = [MetricRecordInline]


@admin.register(MetricRecord)
class MetricRecordAdmin(ReadOnlyAdminMixin, admin.ModelAdmin):
    list_display = ['metric', 'value', 'clip_name', 'run', 'created_at']
    list_filter = ['metric']
    search_fields = ['clip_name']
