import mock
import pytest

from retina_align.exceptions import (DataError, ManifestError,
                                     NumericalError)
from retina_align.main import UI, main, parse_args

DATA_ARGS = ['--manifest', 'data.jsonl', '--image-emb', 'feats.emb']


@pytest.fixture(autouse=True)
def no_config_file(monkeypatch):
    monkeypatch.setattr('retina_align.main.get_config_file', lambda: None)


@pytest.fixture
def mock_ui(monkeypatch):
    ui = mock.Mock(spec=UI)
    monkeypatch.setattr('retina_align.main.UI', mock.Mock(return_value=ui))
    return ui


def run_main(argv):
    with pytest.raises(SystemExit) as excinfo:
        main(argv=argv)
    return excinfo.value.code


def test_pretrain(mock_ui):
    with mock.patch('retina_align.main.run_pretrain') as mock_method:
        assert run_main(['pretrain'] + DATA_ARGS +
                        ['--out', 'model.json', '--precision', 'f32']) == 0
        mock_method.assert_called_once_with(
            ui=mock_ui,
            manifest='data.jsonl',
            image_emb='feats.emb',
            out='model.json',
            prompt_bank=None,
            registry=None,
            config=None,
            seed=None,
            precision='f32',
            text_dim=None,
            text_seed=None,
            loss_trace=None,
        )
    mock_ui.close.assert_called_once_with()


def test_zeroshot(mock_ui):
    with mock.patch('retina_align.main.run_zeroshot') as mock_method:
        assert run_main(['zeroshot', '--model', 'model.json'] + DATA_ARGS +
                        ['--mode', 'anomaly', '--classes', 'noDR, G',
                         '--out', 'p.jsonl']) == 0
        mock_method.assert_called_once_with(
            ui=mock_ui,
            model_path='model.json',
            manifest='data.jsonl',
            image_emb='feats.emb',
            out='p.jsonl',
            mode='anomaly',
            classes=['noDR', 'G'],
            prompt_bank=None,
            registry=None,
            text_dim=None,
            text_seed=None,
            report=None,
        )


def test_adapt(mock_ui):
    with mock.patch('retina_align.main.run_adapt') as mock_method:
        assert run_main(['--threads', '2', 'adapt', '--model', 'model.json'] +
                        DATA_ARGS + ['--method', 'lp', '--shots', '5',
                                     '--features', 'proj-norm',
                                     '--out', 'adapter.json',
                                     '--task', 'ordinal']) == 0
        mock_method.assert_called_once_with(
            ui=mock_ui,
            model_path='model.json',
            manifest='data.jsonl',
            image_emb='feats.emb',
            out='adapter.json',
            method='lp',
            predictions=None,
            shots=5,
            fraction=None,
            seed=None,
            classes=None,
            mode='naive',
            config=None,
            folds=5,
            test_fraction=0.2,
            task='ordinal',
            threads=2,
            prompt_bank=None,
            registry=None,
            text_dim=None,
            text_seed=None,
            report=None,
            feature_choice='projected_normalized',
        )


def test_eval(mock_ui):
    with mock.patch('retina_align.main.run_eval') as mock_method:
        assert run_main(['eval', '--predictions', 'p.jsonl', '--labels',
                         'data.jsonl', '--task', 'binary', '--classes',
                         'N,G', '--out', 'report.json']) == 0
        mock_method.assert_called_once_with(
            ui=mock_ui, predictions='p.jsonl', labels='data.jsonl',
            out='report.json', task='binary', classes=['N', 'G'],
            registry=None)


@pytest.mark.parametrize('argv', [
    ['--seed', '3', 'gradcheck', '--configs', '5'],
    ['gradcheck', '--configs', '5', '--seed', '3'],
])
def test_global_flags_on_either_side(mock_ui, argv):
    with mock.patch('retina_align.main.run_gradcheck') as mock_method:
        assert run_main(argv) == 0
        mock_method.assert_called_once_with(mock_ui, n_configs=5, seed=3)


def test_flag_after_the_command_wins():
    parsed = parse_args(['--seed', '1', 'gradcheck', '--seed', '2'])
    assert parsed['seed'] == 2
    assert parsed['threads'] == 1
    assert parsed['command'] == 'gradcheck'


@pytest.mark.parametrize('argv', [
    [],
    ['adapt', '--model', 'm.json'] + DATA_ARGS +
    ['--method', 'lp', '--out', 'a.json', '--shots', '1', '--fraction',
     '0.5'],
    ['adapt', '--model', 'm.json'] + DATA_ARGS +
    ['--method', 'lp', '--out', 'a.json', '--fraction', '1.5'],
    ['adapt', '--model', 'm.json'] + DATA_ARGS +
    ['--method', 'knn', '--out', 'a.json'],
    ['zeroshot', '--model', 'm.json'] + DATA_ARGS +
    ['--mode', 'clever', '--out', 'p.jsonl'],
    ['pretrain', '--out', 'model.json'],
])
def test_usage_errors(argv):
    with pytest.raises(SystemExit) as excinfo:
        parse_args(argv)
    assert excinfo.value.code == 2


@pytest.mark.parametrize('error, exit_code', [
    (DataError('bad data'), 3),
    (ManifestError('unknown label', position='line 3'), 3),
    (NumericalError('degenerate projection', index=4), 4),
    (FileNotFoundError(2, 'No such file or directory', 'feats.emb'), 3),
    (PermissionError(13, 'Permission denied', 'out.json'), 3),
])
def test_exit_codes(mock_ui, error, exit_code):
    with mock.patch('retina_align.main.run_gradcheck',
                    side_effect=error):
        assert run_main(['gradcheck']) == exit_code
    mock_ui.error.assert_called_once_with(str(error))
    mock_ui.close.assert_called_once_with()


def test_missing_input_file(mock_ui, tmpdir):
    assert run_main([
        'zeroshot', '--model', str(tmpdir.join('m.json')),
        '--manifest', str(tmpdir.join('data.jsonl')),
        '--image-emb', str(tmpdir.join('missing.emb')),
        '--out', str(tmpdir.join('p.jsonl'))]) == 3
    assert 'missing.emb' in mock_ui.error.call_args[0][0]
    assert not mock_ui.fatal.called


def test_unexpected_error_is_fatal(mock_ui):
    mock_ui.fatal.side_effect = SystemExit
    with mock.patch('retina_align.main.run_synth',
                    side_effect=RuntimeError('boom')):
        with pytest.raises(SystemExit):
            main(argv=['synth', '--out-emb', 'x.emb', '--out-manifest',
                       'x.jsonl'])
    mock_ui.fatal.assert_called_once_with('unexpected error: boom')


def test_verbose_sets_debug_level(monkeypatch):
    ui_class = mock.Mock()
    monkeypatch.setattr('retina_align.main.UI', ui_class)
    with mock.patch('retina_align.main.run_gradcheck'):
        run_main(['gradcheck', '--verbose', '--stdout'])
    ui_class.assert_called_once_with(10, True)
