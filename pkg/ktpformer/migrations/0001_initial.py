from django.db import migrations, models
import django.db.models.deletion


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='ExperimentRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('name', models.CharField(blank=True, default='', help_text='Free-form run label', max_length=200)),
                ('mode', models.CharField(choices=[('UMD', 'Unified mode'), ('PMD', 'Parallel mode'), ('SMD-S', 'Sequential mode, single TPA'), ('SMD', 'Sequential mode'), ('BASELINE', 'Plain spatio-temporal transformer')], default='SMD', max_length=10)),
                ('kpa_variant', models.CharField(default='full', max_length=20)),
                ('tpa_variant', models.CharField(default='full', max_length=20)),
                ('config_text', models.TextField(help_text='Serialized run configuration')),
                ('seed', models.IntegerField(default=0)),
                ('status', models.CharField(choices=[('running', 'Running'), ('completed', 'Completed'), ('failed', 'Failed')], default='running', max_length=20)),
                ('checkpoint_path', models.CharField(blank=True, default='', max_length=500)),
                ('parameter_count', models.BigIntegerField(default=0)),
                ('flop_count', models.BigIntegerField(default=0, help_text='Multiply-accumulate FLOPs of one forward pass')),
                ('steps', models.IntegerField(default=0)),
                ('final_loss', models.FloatField(blank=True, null=True)),
                ('duration_seconds', models.FloatField(default=0.0)),
                ('error_message', models.TextField(blank=True, help_text='Error message if the run failed', null=True)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
            ],
            options={
                'verbose_name': 'Experiment Run',
                'verbose_name_plural': 'Experiment Runs',
                'ordering': ['-created_at'],
                'get_latest_by': 'created_at',
            },
        ),
        migrations.CreateModel(
            name='MetricRecord',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('clip_name', models.CharField(help_text="Clip name, or 'all' for the pooled report", max_length=200)),
                ('metric', models.CharField(max_length=50)),
                ('value', models.FloatField()),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('run', models.ForeignKey(blank=True, null=True, on_delete=django.db.models.deletion.CASCADE, related_name='metrics', to='ktpformer.experimentrun')),
            ],
            options={
                'verbose_name': 'Metric Record',
                'verbose_name_plural': 'Metric Records',
                'ordering': ['clip_name', 'metric'],
            },
        ),
    ]
