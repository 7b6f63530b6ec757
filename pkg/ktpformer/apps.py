from django.apps import AppConfig


class KtpformerConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'ktpformer'
    verbose_name = 'KTPFormer lifting runs'
