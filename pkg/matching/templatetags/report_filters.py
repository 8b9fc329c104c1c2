# File: matching/templatetags/report_filters.py
# CUSTOM TEMPLATE FILTERS FOR NUMBER DISPLAY IN REPORTS

import math

from django import template

register = template.Library()


def _missing(value):
    if value is None or value == '':
        return True
    try:
        return math.isnan(float(value))
    except (TypeError, ValueError):
        return True


@register.filter(name='stat')
def stat(value, digits=2):
    """
    Fixed-point statistic, blank when undefined

    Examples:
        245.714 → "245.71"
        None → "-"
        inf → "inf"
    """
    if _missing(value):
        return '-'
    value = float(value)
    if math.isinf(value):
        return 'inf' if value > 0 else '-inf'
    return f'{value:.{int(digits)}f}'


@register.filter(name='signed')
def signed(value, digits=2):
    """
    Statistic with an explicit sign, as standardized differences are shown

    Examples:
        -0.094 → "-0.09"
        0.02 → "+0.02"
    """
    if _missing(value):
        return '-'
    value = float(value)
    if math.isinf(value):
        return '+inf' if value > 0 else '-inf'
    return f'{value:+.{int(digits)}f}'


@register.filter(name='pvalue')
def pvalue(value):
    """
    P-value with four decimals; tiny values collapse to a bound

    Examples:
        0.04321 → "0.0432"
        1e-9 → "<0.0001"
    """
    if _missing(value):
        return '-'
    value = float(value)
    if value < 1e-4:
        return '<0.0001'
    return f'{value:.4f}'


@register.filter(name='gamma')
def gamma(threshold):
    """
    Sensitivity threshold, ">100" past the search range
    """
    if threshold is None:
        return '-'
    display = getattr(threshold, 'display', None)
    if display is not None:
        return display
    return stat(threshold)


@register.filter(name='pad')
def pad(value, width):
    """Left-align to a column width."""
    return str(value).ljust(int(width))


@register.filter(name='rpad')
def rpad(value, width):
    """Right-align to a column width."""
    return str(value).rjust(int(width))
