import io
import json
import os

log_files = ['retina_align_main.log']


def print_logs():
    """
    debug tests by sending the contents of the log files to stdout
    """
    for file in log_files:
        if os.path.isfile(file):
            with open(file, 'r') as o:
                print('>>> {} >>>'.format(file))
                print(o.read())
                print('<<< {} <<<'.format(file))


def read_logs():
    output = []
    for file in log_files:
        if os.path.isfile(file):
            with open(file, 'r') as f:
                output.append(f.read())
    return "\n".join(output)


def write_json_lines(path, rows):
    with io.open(str(path), 'w', encoding='utf-8') as f:
        for row in rows:
            f.write(json.dumps(row) + '\n')


def read_json_lines(path):
    with io.open(str(path), 'r', encoding='utf-8') as f:
        return [json.loads(line) for line in f if line.strip()]


def write_json(path, document):
    with io.open(str(path), 'w', encoding='utf-8') as f:
        json.dump(document, f)
