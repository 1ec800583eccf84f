"""Exceptions raised across the harness."""


class HarnessError(Exception):
    pass


class CorpusParseError(HarnessError):
    def __init__(self, message, line_number=None):
        self.line_number = line_number
        if line_number is not None:
            message = "line {0}: {1}".format(line_number, message)
        super().__init__(message)


class DocumentDateError(HarnessError):
    def __init__(self, document_ids):
        self.document_ids = list(document_ids)
        super().__init__("missing or unparseable date in document(s): {0}".format(", ".join(self.document_ids)))


class DuplicateDocumentError(HarnessError):
    def __init__(self, document_id):
        self.document_id = document_id
        super().__init__("duplicate document id: {0}".format(document_id))


class PeriodError(HarnessError):
    pass


class PromptError(HarnessError):
    pass


class TemplateError(HarnessError):
    pass


class BackendError(HarnessError):
    def __init__(self, message, request_id=None):
        self.request_id = request_id
        super().__init__(message)

    def as_dict(self):
        return {"request_id": self.request_id, "message": str(self)}


class CacheError(HarnessError):
    def __init__(self, message, line_number=None):
        self.line_number = line_number
        if line_number is not None:
            message = "cache line {0}: {1}".format(line_number, message)
        super().__init__(message)


class CacheMissError(HarnessError):
    pass


class ReportError(HarnessError):
    pass


class ProbeError(HarnessError):
    pass


class ConfigError(HarnessError):
    def __init__(self, message, missing=()):
        self.missing = list(missing)
        if self.missing:
            message = "{0}: {1}".format(message, ", ".join(self.missing))
        super().__init__(message)
