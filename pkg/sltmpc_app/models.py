from django.db import models


class ExperimentRun(models.Model):
    """One invocation of the sltmpc management command"""
    COMMAND_CHOICES = [
        ('synth-tubes', 'Synthesize tubes'),
        ('solve', 'Solve once'),
        ('simulate', 'Closed-loop simulation'),
        ('roa', 'Region of attraction'),
        ('compare', 'Method comparison'),
        ('verify', 'Containment check'),
    ]

    command = models.CharField(max_length=20, choices=COMMAND_CHOICES)
    method = models.CharField(max_length=40, blank=True)
    theta = models.FloatField(null=True, blank=True)
    seed = models.BigIntegerField(null=True, blank=True)
    exit_status = models.PositiveSmallIntegerField(default=0)
    out_dir = models.CharField(max_length=500)
    config = models.JSONField(default=dict)
    summary = models.JSONField(default=dict, blank=True)
    created_at = models.DateTimeField(auto_now_add=True)

    class Meta:
        ordering = ['-created_at']

    def __str__(self):
        return f"{self.command} ({self.method}, theta={self.theta}) -> {self.exit_status}"

    @property
    def succeeded(self):
        return self.exit_status == 0
