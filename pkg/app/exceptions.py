"""Errors raised by the toolforge pipeline."""


class ToolforgeError(Exception):
    """Base class for all pipeline errors"""


class ConfigError(ToolforgeError):
    pass


# spec_model
class ParseFailure(ToolforgeError):
    pass


class SchemaMismatch(ToolforgeError):
    pass


class CompletionFailed(ToolforgeError):
    pass


# llm_gateway
class GatewayError(ToolforgeError):
    def __init__(self, message: str, retries: int = 0):
        super().__init__(message)
        self.retries = retries


class TransportError(GatewayError):
    pass


class RateLimited(GatewayError):
    pass


class BadRequest(GatewayError):
    def __init__(self, message: str, status_code: int = 400):
        super().__init__(message, retries=0)
        self.status_code = status_code


class DimensionMismatch(GatewayError):
    pass


class UnscriptedPrompt(GatewayError):
    def __init__(self, fingerprint: str, purpose: str = ""):
        super().__init__(f"no scripted reply for prompt {fingerprint} (purpose={purpose or 'chat'})")
        self.fingerprint = fingerprint


# embedder / fn_graph
class MissingField(ToolforgeError):
    pass


class MissingEmbedding(ToolforgeError):
    pass


class JudgeFormatError(ToolforgeError):
    pass


class NoEdges(ToolforgeError):
    pass


# synthesis
class IntentFormatError(ToolforgeError):
    pass


class MalformedToolCall(ToolforgeError):
    pass


class ToolFormatError(ToolforgeError):
    pass


# quality
class VerdictFormatError(ToolforgeError):
    pass


# sampler
class SerializationError(ToolforgeError):
    pass


class ManifestMismatch(ToolforgeError):
    pass


# pipeline
class StageInputMissing(ToolforgeError):
    pass


class ConfigHashMismatch(ToolforgeError):
    pass


class DomainFormatError(ToolforgeError):
    pass
