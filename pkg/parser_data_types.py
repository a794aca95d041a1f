import argparse

import blockspace
import datasets
from archgraph import MacroConfig
from nas_common import NasParseException

TypeExc = argparse.ArgumentTypeError

# the next few routines implement data types
# of blocksearch parameters, shared by the CLI and the YAML manifest


def boolean(boolstr):
    if boolstr is True:
        return True
    elif boolstr is False:
        return False
    b = str(boolstr).lower()
    if b == "y" or b == "yes" or b == "t" or b == "true":
        bval = True
    elif b == "n" or b == "no" or b == "f" or b == "false":
        bval = False
    else:
        raise TypeExc("boolean value must be y|yes|t|true|n|no|f|false")
    return bval


def integer(int_str):
    if isinstance(int_str, bool):
        raise TypeExc("integer value expected, got %s" % int_str)
    try:
        return int(int_str)
    except (TypeError, ValueError):
        raise TypeExc("integer value expected, got %s" % repr(int_str))


def positive_integer(posint_str):
    intval = integer(posint_str)
    if intval <= 0:
        raise TypeExc("integer value greater than zero expected")
    return intval


def non_negative_integer(nonneg_str):
    intval = integer(nonneg_str)
    if intval < 0:
        raise TypeExc("non-negative integer value expected")
    return intval


def non_negative_float(float_str):
    try:
        fval = float(float_str)
    except (TypeError, ValueError):
        raise TypeExc("number expected, got %s" % repr(float_str))
    if not fval >= 0.0:
        raise TypeExc("non-negative number expected")
    return fval


def positive_float(float_str):
    fval = non_negative_float(float_str)
    if fval == 0.0:
        raise TypeExc("number greater than zero expected")
    return fval


def probability(prob_str):
    fval = non_negative_float(prob_str)
    if fval > 1.0:
        raise TypeExc("probability must lie in [0, 1]")
    return fval


def block_config(block_str):
    try:
        return blockspace.parse_config(block_str)
    except NasParseException as e:
        raise TypeExc(str(e))


# list of branch operations, e.g. "conv(3),sp_conv(5)" (YAML may give a list)


def op_list(ops):
    if isinstance(ops, str):
        ops = [o for o in ops.replace(" ", "").split(",") if o]
    if not ops:
        raise TypeExc("operation list must be non-empty")
    try:
        return tuple(blockspace.parse_branch(str(o)) for o in ops)
    except NasParseException as e:
        raise TypeExc(str(e))


def combiner_list(combiners):
    if isinstance(combiners, str):
        combiners = [c for c in combiners.replace(" ", "").split(",") if c]
    if not combiners:
        raise TypeExc("combiner list must be non-empty")
    try:
        return tuple(blockspace.parse_combiner(str(c)) for c in combiners)
    except NasParseException as e:
        raise TypeExc(str(e))


# branches[:ops[:combiners]], for example
#    4
#    2:conv(3),sp_conv(5)
#    4:conv(1),conv(3),conv(5):concat


def search_space(space_str):
    fields = str(space_str).strip().split(":")
    if len(fields) > 3:
        raise TypeExc("search space must look like branches[:ops[:combiners]]")
    kw = {"branch_count": positive_integer(fields[0])}
    if len(fields) > 1:
        kw["allowed_ops"] = op_list(fields[1])
    if len(fields) > 2:
        kw["allowed_combiners"] = combiner_list(fields[2])
    try:
        return blockspace.SearchSpace(**kw)
    except NasParseException as e:
        raise TypeExc(str(e))


# stages,repeats,initial-filters e.g. "3,3,112"
# input shape and classes are bound later from the dataset


def macro_config(macro_str):
    fields = str(macro_str).replace(" ", "").split(",")
    if len(fields) != 3:
        raise TypeExc("macro must look like stages,repeats,initial-filters")
    stages, repeats, filters = (positive_integer(f) for f in fields)
    try:
        return MacroConfig(stages=stages, repeats=repeats, initial_filters=filters)
    except NasParseException as e:
        raise TypeExc(str(e))


def dataset_name(name):
    if name not in datasets.PROFILES:
        raise TypeExc("dataset must be one of %s" % ", ".join(sorted(datasets.PROFILES)))
    return name


def dtype_name(name):
    if name not in ("float32", "float64"):
        raise TypeExc("dtype must be float32 or float64")
    return name
