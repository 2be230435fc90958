from dataclasses import dataclass, field
from pathlib import Path
from typing import (
    Any,
    Callable,
    Mapping,
    MutableMapping,
    Optional,
    Sequence,
    Text,
    Union,
)

__doc__ = Path(__file__).with_suffix(".rst").read_text()


def _describe_type(annotation: Any) -> Text:
    """Human readable name of a configuration type."""
    from typing import get_args, get_origin, Union, Sequence, Tuple, Dict, List

    origin, args = get_origin(annotation), get_args(annotation)
    if origin is Union and len(args) == 2 and args[-1] is type(None):  # noqa: E721
        return _describe_type(args[0])
    if origin in (Tuple, tuple):
        return f"list of {len(args)} {_describe_type(args[0])}"
    if origin in (List, list, Sequence):
        return f"list of {_describe_type(args[0])}s"
    if origin in (Dict, dict):
        return "dictionary"
    names = {str: "string", int: "integer", float: "real", bool: "boolean"}
    if annotation in names:
        return names[annotation]
    return getattr(annotation, "__name__", str(annotation))


def _summary(docs: Text) -> Text:
    """Short and long descriptions of a docstring, without the parameters."""
    from docstring_parser import parse

    docstring = parse(docs)
    result = (docstring.short_description or "").strip() + "\n"
    if docstring.long_description:
        result += "\n" + docstring.long_description.strip() + "\n\n"
    return result.rstrip()


def _fields(function: Callable, drop: Sequence[Text] = (), docs: Optional[Text] = None):
    """Attrs fields describing the configurable parameters of a function.

    Types come from the docstring when it declares one, e.g. ``slope (float): ...``,
    and from the signature otherwise. Parameters without defaults are mandatory.
    """
    from inspect import Signature, signature
    from typing import get_type_hints
    import typing

    import attr
    from docstring_parser import parse
    from omegaconf import MISSING

    documented = {p.arg_name: p for p in parse(docs or function.__doc__ or "").params}
    hints = get_type_hints(function)
    namespace = {k: getattr(typing, k) for k in dir(typing) if k[0] != "_"}

    result = {}
    for name, parameter in signature(function).parameters.items():
        if name in drop or parameter.kind != parameter.POSITIONAL_OR_KEYWORD:
            continue
        default = MISSING if parameter.default is Signature.empty else parameter.default
        doc = documented.get(name)
        if doc is not None and doc.type_name is not None:
            type_ = eval(doc.type_name, {}, namespace)
        else:
            type_ = hints.get(name, None)
        result[name] = attr.ib(
            default=default,
            type=type_,
            metadata=dict(doc=doc.description if doc is not None else None),
        )
    return result


def _create_config(
    function: Callable,
    name: Optional[Text] = None,
    drop: Sequence[Text] = (),
    docs: Optional[Text] = None,
):
    """Structured configuration class for a registered function."""
    from inspect import signature
    from re import split

    from attr import make_class

    name = function.__name__ if name is None else name
    docs = docs or function.__doc__
    class_name = "".join(u.title() for u in split(r"\s|_|-", name))
    takes_kwargs = any(
        p.kind == p.VAR_KEYWORD for p in signature(function).parameters.values()
    )
    result = make_class(
        class_name,
        _fields(function, drop, docs),
        bases=(dict if takes_kwargs else object,),
    )
    if docs:
        result.__doc__ = _summary(docs)
    return result


@dataclass
class Registry:
    """Named collection of configurable building blocks.

    Functions and classes are added with the registry used as a decorator. Each entry
    can then be created from a plain dictionary or YAML section
    ``{name: ..., **params}`` validated against a structured schema derived from its
    signature and docstring.
    """

    name: Text
    """Name of the registry, used in error messages and documentation."""
    factories: MutableMapping[Text, Callable] = field(default_factory=dict)
    """Callable creating each entry."""
    configs: MutableMapping[Text, Any] = field(default_factory=dict)
    """Structured configuration class of each entry."""

    def __call__(
        self,
        function: Optional[Any] = None,
        name: Optional[Text] = None,
        is_factory: Optional[bool] = None,
        docs: Optional[Text] = None,
    ) -> Callable:
        """Registers a function, a factory function, or a class.

        Args:
            function: object to register. If ``None``, returns a decorator.
            name: key of the entry in the registry. Defaults to ``function.__name__``.
            is_factory: whether calling ``function`` with the configuration creates the
                object. Defaults to ``True`` for classes. Otherwise, arguments without
                defaults are left out of the configuration and must be supplied when
                the entry is built, see :py:meth:`build`.
            docs: docstring overriding that of ``function`` in the documentation and
                schema.

        Returns:
            ``function`` unchanged, or a decorator.
        """
        from functools import partial
        from inspect import Signature, isclass, signature
        from warnings import warn

        if function is None:
            return partial(self.__call__, name=name, is_factory=is_factory, docs=docs)
        name = function.__name__ if name is None else name
        if name in self.factories:
            warn(f"Overwriting {self.name} entry {name}")
        if is_factory is None:
            is_factory = isclass(function)

        drop: Sequence[Text] = ()
        if is_factory:
            self.factories[name] = function
        else:
            parameters = signature(function).parameters
            drop = [k for k, v in parameters.items() if v.default is Signature.empty]

            def bind(**kwargs):
                return partial(function, **kwargs) if kwargs else function

            self.factories[name] = bind
        self.configs[name] = _create_config(function, name=name, drop=drop, docs=docs)
        return function

    def __contains__(self, name: Text) -> bool:
        return name in self.factories

    def validate(self, settings: Union[Text, Mapping]):
        """Merges settings with the schema of the entry they name.

        Returns:
            The entry name and the validated configuration.
        """
        from omegaconf import (
            KeyValidationError,
            MissingMandatoryValue,
            OmegaConf,
            ValidationError,
        )
        from omegaconf.errors import ConfigKeyError

        if isinstance(settings, Text):
            settings = dict(name=settings)
        if "name" not in settings:
            raise KeyValidationError(f"Missing `name` key in {self.name} settings.")
        name = settings["name"]
        if name not in self.configs:
            known = ", ".join(sorted(self.configs))
            raise KeyValidationError(f"Unknown {self.name} {name}. Known: {known}.")

        schema = OmegaConf.structured(self.configs[name]())
        config = OmegaConf.create({k: v for k, v in settings.items() if k != "name"})
        try:
            config = OmegaConf.merge(schema, config)
            OmegaConf.to_container(config, throw_on_missing=True)
        except (KeyValidationError, ConfigKeyError) as error:
            raise KeyValidationError(
                f"Incorrect key {error.key} in {self.name} {name}"
            ) from error
        except ValidationError as error:
            raise ValidationError(
                f"Incorrect value {error.value!r} for key '{error.key}' in {self.name}"
                f" {name}"
            ) from error
        except MissingMandatoryValue as error:
            raise MissingMandatoryValue(
                f"Missing mandatory key '{error.key}' in {self.name} {name}"
            ) from error
        return name, config

    def factory(self, settings: Union[Text, Mapping], materialize: bool = True) -> Any:
        """Creates the entry named in the settings.

        Args:
            settings: ``{name: ..., **params}``. A string is shorthand for
                ``{name: settings}``.
            materialize: if ``False``, returns a no-argument callable instead.
        """
        from functools import partial
        from omegaconf import OmegaConf

        name, config = self.validate(settings)
        kwargs = OmegaConf.to_container(config, resolve=True)
        factory = self.factories[name]
        return factory(**kwargs) if materialize else partial(factory, **kwargs)

    def build(self, settings: Union[Text, Mapping], **context) -> Any:
        """Creates an entry, supplying run-time objects to non-factory functions.

        Non-factory entries receive their configuration first, then ``context``. For
        instance, a cost entry ``margin(environment, slope=20)`` is built with
        ``registry.build(dict(name="margin", slope=5), environment=env)``.
        """
        result = self.factory(settings)
        return result(**context) if context else result

    @property
    def parameter_docs(self) -> Text:
        """Documentation of every entry and its parameters, in restructured text."""
        from textwrap import indent, wrap

        from attr import fields
        from omegaconf import MISSING

        result = ""
        for name, config in self.configs.items():
            text = f"``name: {name.strip()}``\n"
            text += indent((config.__doc__ or "").strip(), "    ") + "\n\n"
            for param in fields(config):
                kind = f" ({_describe_type(param.type)})" if param.type else ""
                if param.default is MISSING:
                    default = "Required argument."
                elif param.default is None:
                    default = "Optional argument."
                else:
                    default = f"Optional argument defaults to {param.default}."
                doc = param.metadata["doc"] or ""
                doc = doc[:1].upper() + doc[1:]
                description = indent("\n".join(wrap(doc)), " " * 12)
                entry = f"        * **{param.name}**{kind}: {default}\n{description}"
                text += entry.rstrip() + "\n\n"
            result += text.rstrip() + "\n\n"
        return result


def confsafe_registries() -> Mapping[Text, Registry]:
    """Registries for the configurable sections of an experiment."""
    from confsafe.backups import register_backup
    from confsafe.envs import register_environment
    from confsafe.models import register_model
    from confsafe.objectives import register_cost

    return dict(
        environment=register_environment,
        model=register_model,
        cost=register_cost,
        backup=register_backup,
    )
