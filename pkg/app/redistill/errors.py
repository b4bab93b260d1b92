class RedistillError(Exception):
  pass


class DomainError(RedistillError):
  pass


class ShapeError(RedistillError):
  pass


class ConfigError(RedistillError):

  def __init__(self, message, field=None):
    self.reason = message
    self.field = field
    if field:
      message = '%s: %s' % (field, message)
    super(ConfigError, self).__init__(message)


class InputError(RedistillError):
  pass


class RetrievalError(RedistillError):
  pass


class ParseError(RedistillError):

  def __init__(self, message, uid=None, field=None):
    prefix = 'record %s' % (uid if uid is not None else '?')
    if field:
      prefix += ', field %s' % field
    super(ParseError, self).__init__('%s: %s' % (prefix, message))
    self.uid = uid
    self.field = field


class NumericalError(RedistillError):

  def __init__(self, message, iteration=None):
    if iteration is not None:
      message = 'iteration %d: %s' % (iteration, message)
    super(NumericalError, self).__init__(message)
    self.iteration = iteration
