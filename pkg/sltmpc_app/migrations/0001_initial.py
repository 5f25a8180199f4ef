# Generated by Django 4.2.7 on 2026-10-19 09:12

from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='ExperimentRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('command', models.CharField(choices=[('synth-tubes', 'Synthesize tubes'), ('solve', 'Solve once'), ('simulate', 'Closed-loop simulation'), ('roa', 'Region of attraction'), ('compare', 'Method comparison'), ('verify', 'Containment check')], max_length=20)),
                ('method', models.CharField(blank=True, max_length=40)),
                ('theta', models.FloatField(blank=True, null=True)),
                ('seed', models.BigIntegerField(blank=True, null=True)),
                ('exit_status', models.PositiveSmallIntegerField(default=0)),
                ('out_dir', models.CharField(max_length=500)),
                ('config', models.JSONField(default=dict)),
                ('summary', models.JSONField(blank=True, default=dict)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
            ],
            options={
                'ordering': ['-created_at'],
            },
        ),
    ]
