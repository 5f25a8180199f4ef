from django.apps import AppConfig


class SltmpcAppConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'sltmpc_app'
    verbose_name = 'SLTMPC Tube Toolkit'
