from .dataset import SignalSet, load_split, write_dataset
from .synth import SignalSample, SignalSpec, gen_signal
from .teachers import PRESETS, FrozenTeacher, TeacherSpec, preset

__all__ = [
    "SignalSet", "load_split", "write_dataset", "SignalSample", "SignalSpec", "gen_signal",
    "PRESETS", "FrozenTeacher", "TeacherSpec", "preset",
]
