import string

import pytest

from firm.registry import parse_registry
from firm.sim import bundled_registry_text


@pytest.fixture
def catalog_text():
    return bundled_registry_text("catalog.conf")


@pytest.fixture
def catalog_registry(catalog_text):
    # the catalog as printed names adder/mean without defining them
    return parse_registry(catalog_text, strict=False)


@pytest.fixture
def weather_registry():
    return parse_registry(bundled_registry_text("weather.conf"))


def simple_service(name, impls):
    """Registry text for one simple service; impls is [(impl, [(alias, addr), ...])]."""
    lines = [f"service {name} {{", "type simple;"]
    for impl, deps in impls:
        lines.append(f"impl {impl} {{")
        lines += [f"{alias} {addr};" for alias, addr in deps]
        lines.append("}")
    lines.append("}")
    return "\n".join(lines)


def numbered(prefix, count, subnet=9, start=1):
    letters = string.ascii_lowercase
    return [(f"{prefix}{letters[i // 26]}{letters[i % 26]}", f"10.0.{subnet}.{start + i}") for i in range(count)]
