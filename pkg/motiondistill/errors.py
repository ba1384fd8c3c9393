'''
Exceptions raised by motiondistill.

All of them derive from builtin exception types, so code that
only knows about ValueError or IOError keeps working.
'''


class ShapeError(ValueError):
    '''Array dimensions do not match what an operation needs.'''


class TemplateError(ValueError):
    '''A body template violates one of its invariants.'''


class ConfigError(ValueError):
    '''A configuration value or file is invalid.'''


class ChecksumError(ValueError):
    '''An archive on disk is corrupt or incomplete.'''


class TransportError(IOError):
    '''The remote score model could not be reached.'''


class ProtocolError(TransportError):
    '''A frame of the mdsv1 wire protocol is malformed.'''


class RemoteScoreError(TransportError):
    '''The remote score model answered with an error frame.'''


class NonFiniteGradientError(ArithmeticError):
    '''The optimisation produced a NaN or infinite gradient.'''

    def __init__(self, message, iteration=None, dump_path=None):
        super(NonFiniteGradientError, self).__init__(message)
        self.iteration = iteration
        self.dump_path = dump_path
