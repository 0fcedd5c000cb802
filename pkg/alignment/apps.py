from django.apps import AppConfig

# Loads configuration for the alignment app when project is run
class AlignmentAppConfig(AppConfig):
    default_auto_field = "django.db.models.BigAutoField"
    name = "alignment"
    verbose_name = "Point cloud alignment"
