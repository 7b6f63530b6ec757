from django.db import models


class ExperimentRun(models.Model):
    """One `train` invocation: its configuration, outcome and artefacts."""
    STATUS_CHOICES = [
        ('running', 'Running'),
        ('completed', 'Completed'),
        ('failed', 'Failed'),
    ]

    MODE_CHOICES = [
        ('UMD', 'Unified mode'),
        ('PMD', 'Parallel mode'),
        ('SMD-S', 'Sequential mode, single TPA'),
        ('SMD', 'Sequential mode'),
        ('BASELINE', 'Plain spatio-temporal transformer'),
    ]

    name = models.CharField(max_length=200, blank=True, default='', help_text="Free-form run label")
    mode = models.CharField(max_length=10, choices=MODE_CHOICES, default='SMD')
    kpa_variant = models.CharField(max_length=20, default='full')
    tpa_variant = models.CharField(max_length=20, default='full')
    config_text = models.TextField(help_text="Serialized run configuration")
    seed = models.IntegerField(default=0)
    status = models.CharField(max_length=20, choices=STATUS_CHOICES, default='running')
    checkpoint_path = models.CharField(max_length=500, blank=True, default='')
    parameter_count = models.BigIntegerField(default=0)
    flop_count = models.BigIntegerField(default=0, help_text="Multiply-accumulate FLOPs of one forward pass")
    steps = models.IntegerField(default=0)
    final_loss = models.FloatField(blank=True, null=True)
    duration_seconds = models.FloatField(default=0.0)
    error_message = models.TextField(blank=True, null=True, help_text="Error message if the run failed")
    created_at = models.DateTimeField(auto_now_add=True)

    class Meta:
        ordering = ['-created_at']
        get_latest_by = 'created_at'
        verbose_name = "Experiment Run"
        verbose_name_plural = "Experiment Runs"

    def __str__(self):
        return f"{self.name or self.mode} ({self.status})"


class MetricRecord(models.Model):
    """A single evaluation number, optionally tied to the run that produced the checkpoint."""
    run = models.ForeignKey(ExperimentRun, on_delete=models.CASCADE, blank=True, null=True,
                            related_name='metrics')
    clip_name = models.CharField(max_length=200, help_text="Clip name, or 'all' for the pooled report")
    metric = models.CharField(max_length=50)
    value = models.FloatField()
    created_at = models.DateTimeField(auto_now_add=True)

    class Meta:
        ordering = ['clip_name', 'metric']
        verbose_name = "Metric Record"
        verbose_name_plural = "Metric Records"

    def __str__(self):
        return f"{self.metric}={self.value:.3f} on {self.clip_name}"
