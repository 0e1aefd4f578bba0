"""Subscriber node: reads each input in place and logs it."""

from miniflow import Node


def main():
    node = Node()
    for event in node:
        if event["type"] == "INPUT" and event["id"] == "data":
            print(f"received {len(event['value'])} bytes, seq={event.metadata.get('seq')}")
            event.release()
    node.close()


if __name__ == "__main__":
    main()
