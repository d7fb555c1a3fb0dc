from .case import case_crud
from .truth import truth_crud
