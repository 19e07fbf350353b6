OUTPUT_ROOT = 'runs'
OUTPUT_ROOT_ENV = 'FEDATTRIB_OUTPUT_ROOT'
WARNING_FILTERS_ENV = 'FEDATTRIB_WARNING_FILTERS'

CONFIG_FILE = 'config.env'
REPORT_FILE = 'report.json'
ATTRIBUTION_CSV = 'attribution.csv'
DETECTION_CSV = 'detection.csv'
DIAGNOSTICS_LOG = 'diagnostics.jsonl'
TRAINING_LOG = 'training_{phase}.jsonl'
SWEEP_FILE = 'sweep.json'
SWEEP_CSV = 'sweep.csv'
SHARDS_CSV = 'shards.csv'
CHECK_FILE = 'check.json'

EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_RUN_FAILURE = 3
EXIT_CHECK_FAILURE = 4

LOG_FORMAT = '%(levelname)s in %(name)s: %(message)s'
DICT_CONFIG = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'standard': {
            'format': LOG_FORMAT
        }
    },
    'handlers': {
        'default': {
            'level': 'DEBUG',
            'formatter': 'standard',
            'class': 'logging.StreamHandler',
            'stream': 'ext://sys.stderr'
        }
    },
    'loggers': {
        'root': {
            'handlers': ['default'],
            'level': 'INFO',
            'propagate': False
        },
        'matplotlib': {
            'level': 'WARNING'
        }
    }
}
