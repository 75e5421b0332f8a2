# GMENet - missing-sequence completion and expert fusion for glioma marker prediction
