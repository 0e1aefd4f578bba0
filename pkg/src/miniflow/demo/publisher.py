"""Timer-driven publisher node.

PUBLISH_LIMIT (env) bounds the number of messages; 0 or unset publishes
until the daemon stops the dataflow.
"""

import os

from miniflow import Node


def main():
    limit = int(os.environ.get("PUBLISH_LIMIT", "0") or 0)
    payload = os.environ.get("PUBLISH_PAYLOAD", "hello from miniflow").encode()
    node = Node()
    sent = 0
    for event in node:
        if event["type"] == "INPUT" and event["id"] == "tick":
            node.send_output("data", payload, {"greeting": "hi"})
            sent += 1
            print(f"published message {sent}")
            if limit and sent >= limit:
                break
    node.close()


if __name__ == "__main__":
    main()
