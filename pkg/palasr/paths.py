import pathlib


class paths:
    parent = pathlib.Path(__file__).resolve().parent.parent
    data = parent / 'data'
    studies = parent / 'studies'
    reports = parent / 'reports'

    models = parent / 'models'

    @classmethod
    def corpus_file(cls, split, data_dir=None):
        return pathlib.Path(data_dir or cls.data) / f'{split}.palcorp'

    @classmethod
    def model_file(cls, model_name, models_dir=None):
        return pathlib.Path(models_dir or cls.models) / f'{model_name}.ckpt'
