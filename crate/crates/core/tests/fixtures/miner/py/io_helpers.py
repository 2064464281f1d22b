import json


def read_lines(path):
    with open(path) as f:
        return [line.rstrip("\n") for line in f]


async def fetch_json(client, url):
    """Fetch url with the given client and decode the JSON body."""
    response = await client.get(url)
    return json.loads(response.text)


def write_json(path, obj):
    'Serialise obj to path as pretty-printed JSON.'
    with open(path, "w") as f:
        json.dump(obj, f, indent=2)


def escape_path(p):
    r"""Replace backslashes in p with forward slashes."""
    return p.replace("\\", "/")
